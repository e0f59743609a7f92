//! Multi-classifier block: one feature-extraction head and one classifier per branch.
//!
//! A head pools its branch map to a `C`-vector, maps it to `D` features,
//! standardises each feature and applies relu, optionally with a learnable
//! per-feature scale and shift between the last two steps. In train
//! mode the standardisation uses the statistics of the current batch and the
//! gradient flows through them; the running statistics are refreshed from
//! those batch statistics after each step and are what test mode uses. At
//! test time only the feature heads run and their outputs are concatenated
//! into the retrieval descriptor.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::View;
use crate::init::{fan_in_uniform, normal, Parametrized};
use crate::mfaf::{Branch, BranchSet};
use crate::tensor::{
    global_avgpool, global_avgpool_backward, linear, linear_backward, Parameter, Result, Scalar, Tensor, TensorError,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McbConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Learnable scale and shift after standardisation. With a Euclidean
    /// triplet loss the scale can shrink every embedding towards one point.
    pub norm_affine: bool,
}

impl Default for McbConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_classes: 20,
            norm_affine: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, classifiers evaluated.
    Train,
    /// Running statistics, classifiers skipped.
    Test,
}

/// Concatenated per-branch embedding used for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T = f32> {
    pub values: Vec<T>,
    pub view: View,
    pub class_id: u32,
    pub coords: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Head<T> {
    pub embed_w: Parameter<T>,
    pub embed_b: Parameter<T>,
    /// Scale and shift, present when `norm_affine` is set.
    pub affine: Option<(Parameter<T>, Parameter<T>)>,
    pub cls_w: Parameter<T>,
    pub cls_b: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
}

/// Forward values of one head over a batch.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    in_shape: Vec<usize>,
    pooled: Vec<Tensor<T>>,
    /// Pre-standardisation features.
    linear: Vec<Tensor<T>>,
    normed: Vec<Tensor<T>>,
    affine: Vec<Tensor<T>>,
    embedding: Vec<Tensor<T>>,
    /// Per-feature `1 / sqrt(var + eps)` used by the forward pass.
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> HeadCache<T> {
    pub fn linear_features(&self) -> &[Tensor<T>] {
        &self.linear
    }
}

fn stat<T: Scalar>(xs: &[Tensor<T>], i: usize) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().map(|t| t.data()[i]).sum::<T>() / n;
    let ss = xs.iter().map(|t| (t.data()[i] - mean).powi(2)).sum::<T>();
    (mean, ss)
}

impl<T: Scalar> Head<T> {
    pub fn new(prefix: &str, channels: usize, cfg: McbConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, n) = (cfg.embed_dim, cfg.num_classes);
        let p = |name: &str, t| Parameter::new(format!("{prefix}.{name}"), t);
        Self {
            embed_w: p("embed.weight", fan_in_uniform(rng, &[d, channels], channels)),
            embed_b: p("embed.bias", Tensor::zeros(&[d])),
            affine: cfg.norm_affine.then(|| {
                (
                    p("norm.weight", Tensor::full(&[d], T::one())),
                    p("norm.bias", Tensor::zeros(&[d])),
                )
            }),
            cls_w: p("classifier.weight", normal(rng, &[n, d], 0.01)),
            cls_b: p("classifier.bias", Tensor::zeros(&[n])),
            running_mean: p("norm.running_mean", Tensor::zeros(&[d])),
            running_var: p("norm.running_var", Tensor::full(&[d], T::one())),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_b.value.len()
    }

    /// Embeddings for a batch of branch maps of equal shape.
    pub fn extract(&self, maps: &[&Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, HeadCache<T>)> {
        let first = maps.first().ok_or(TensorError::InvalidArgument {
            op: "head",
            reason: "empty batch".into(),
        })?;
        if mode == Mode::Train && maps.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "head",
                reason: "batch statistics need at least two items".into(),
            });
        }
        let mut pooled = Vec::with_capacity(maps.len());
        let mut lin = Vec::with_capacity(maps.len());
        for m in maps {
            first.same_shape(m, "head")?;
            let p = global_avgpool(m)?;
            lin.push(linear(&p, &self.embed_w.value, &self.embed_b.value)?);
            pooled.push(p);
        }
        let d = self.embed_dim();
        let eps = T::lit(BN_EPS);
        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => (0..d)
                .map(|i| {
                    let (m, ss) = stat(&lin, i);
                    (m, T::one() / (ss / T::lit(lin.len() as f64) + eps).sqrt())
                })
                .unzip(),
            Mode::Test => (
                self.running_mean.value.data().to_vec(),
                self.running_var
                    .value
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            ),
        };
        let mut cache = HeadCache {
            in_shape: first.shape().to_vec(),
            pooled,
            linear: Vec::with_capacity(maps.len()),
            normed: Vec::with_capacity(maps.len()),
            affine: Vec::with_capacity(maps.len()),
            embedding: Vec::with_capacity(maps.len()),
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        for x in lin {
            let normed: Vec<T> = (0..d).map(|i| (x.data()[i] - mean[i]) * cache.inv_std[i]).collect();
            let affine: Vec<T> = match &self.affine {
                Some((g, b)) => (0..d)
                    .map(|i| normed[i] * g.value.data()[i] + b.value.data()[i])
                    .collect(),
                None => normed.clone(),
            };
            let emb: Vec<T> = affine.iter().map(|&v| v.max(T::zero())).collect();
            cache.linear.push(x);
            cache.normed.push(Tensor::vector(normed));
            cache.affine.push(Tensor::vector(affine));
            cache.embedding.push(Tensor::vector(emb));
        }
        Ok((cache.embedding.clone(), cache))
    }

    pub fn classify(&self, embedding: &Tensor<T>) -> Result<Tensor<T>> {
        linear(embedding, &self.cls_w.value, &self.cls_b.value)
    }

    /// Accumulates gradients and returns the gradient with respect to each
    /// branch map. `grad_logits` is empty when the classifier did not run.
    pub fn backward(
        &mut self,
        cache: &HeadCache<T>,
        grad_embedding: &[Tensor<T>],
        grad_logits: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let n = cache.embedding.len();
        if grad_embedding.len() != n || !(grad_logits.is_empty() || grad_logits.len() == n) {
            return Err(TensorError::InvalidArgument {
                op: "head_backward",
                reason: format!("{n} cached items, {} gradients", grad_embedding.len()),
            });
        }
        let d = self.embed_dim();
        let mut g_gamma = vec![T::zero(); d];
        let mut g_beta = vec![T::zero(); d];
        // Gradient with respect to the standardised features.
        let mut g_norm: Vec<Vec<T>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut g_emb = grad_embedding[k].clone();
            if let Some(gl) = grad_logits.get(k) {
                let gc = linear_backward(&cache.embedding[k], &self.cls_w.value, gl)?;
                self.cls_w.accumulate(&gc.weight)?;
                self.cls_b.accumulate(&gc.bias)?;
                g_emb.add_assign(&gc.input)?;
            }
            let mut gn = Vec::with_capacity(d);
            for i in 0..d {
                let g_aff = if cache.affine[k].data()[i] > T::zero() {
                    g_emb.data()[i]
                } else {
                    T::zero()
                };
                g_gamma[i] = g_gamma[i] + g_aff * cache.normed[k].data()[i];
                g_beta[i] = g_beta[i] + g_aff;
                gn.push(match &self.affine {
                    Some((g, _)) => g_aff * g.value.data()[i],
                    None => g_aff,
                });
            }
            g_norm.push(gn);
        }
        if let Some((g, b)) = &mut self.affine {
            g.accumulate(&Tensor::vector(g_gamma))?;
            b.accumulate(&Tensor::vector(g_beta))?;
        }

        let mut g_lin: Vec<Vec<T>> = g_norm
            .iter()
            .map(|gn| gn.iter().zip(&cache.inv_std).map(|(&g, &s)| g * s).collect())
            .collect();
        if cache.batch_stats {
            let nf = T::lit(n as f64);
            for i in 0..d {
                let sum_g = g_norm.iter().map(|g| g[i]).sum::<T>();
                let sum_gx = g_norm
                    .iter()
                    .zip(&cache.normed)
                    .map(|(g, x)| g[i] * x.data()[i])
                    .sum::<T>();
                for k in 0..n {
                    let xh = cache.normed[k].data()[i];
                    g_lin[k][i] = cache.inv_std[i] / nf * (nf * g_norm[k][i] - sum_g - xh * sum_gx);
                }
            }
        }
        let mut out = Vec::with_capacity(n);
        for (k, gl) in g_lin.into_iter().enumerate() {
            let ge = linear_backward(&cache.pooled[k], &self.embed_w.value, &Tensor::vector(gl))?;
            self.embed_w.accumulate(&ge.weight)?;
            self.embed_b.accumulate(&ge.bias)?;
            out.push(global_avgpool_backward(&ge.input, &cache.in_shape)?);
        }
        Ok(out)
    }

    /// Exponential moving update of the running statistics from a batch of
    /// pre-standardisation features (unbiased batch variance).
    pub fn update_running_stats(&mut self, batch: &[Tensor<T>]) {
        let n = batch.len();
        if n < 2 {
            return;
        }
        let m = T::lit(BN_MOMENTUM);
        for i in 0..self.embed_dim() {
            let (mean, ss) = stat(batch, i);
            let var = ss / T::lit((n - 1) as f64);
            let rm = &mut self.running_mean.value.data_mut()[i];
            *rm = (T::one() - m) * *rm + m * mean;
            let rv = &mut self.running_var.value.data_mut()[i];
            *rv = (T::one() - m) * *rv + m * var;
        }
    }
}

impl<T: Scalar> Parametrized<T> for Head<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.embed_w, &self.embed_b];
        if let Some((g, b)) = &self.affine {
            v.extend([g, b]);
        }
        v.extend([&self.cls_w, &self.cls_b]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.embed_w, &mut self.embed_b];
        if let Some((g, b)) = &mut self.affine {
            v.extend([g, b]);
        }
        v.extend([&mut self.cls_w, &mut self.cls_b]);
        v
    }
}

/// Three head pairs, one per branch, regardless of which branches are active.
#[derive(Debug, Clone)]
pub struct Mcb<T> {
    pub config: McbConfig,
    pub heads: BTreeMap<Branch, Head<T>>,
}

/// Per-item outputs of a batch, each keyed by active branch.
#[derive(Debug, Clone)]
pub struct McbOutput<T> {
    pub embeddings: Vec<BTreeMap<Branch, Tensor<T>>>,
    /// Empty maps in test mode.
    pub logits: Vec<BTreeMap<Branch, Tensor<T>>>,
    pub caches: BTreeMap<Branch, HeadCache<T>>,
}

impl<T: Scalar> McbOutput<T> {
    /// Embeddings of item `k` concatenated in branch order orig, LF, HF.
    pub fn concatenated(&self, k: usize) -> Vec<T> {
        self.embeddings[k]
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

impl<T: Scalar> Mcb<T> {
    pub fn new(channels: usize, config: McbConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.embed_dim == 0 || config.num_classes < 2 {
            return Err(TensorError::InvalidArgument {
                op: "mcb",
                reason: "need embed_dim >= 1 and at least two classes".into(),
            });
        }
        let heads = Branch::ALL
            .into_iter()
            .map(|b| (b, Head::new(&format!("mcb.{}", b.as_str()), channels, config, rng)))
            .collect();
        Ok(Self { config, heads })
    }

    pub fn forward(&self, batch: &[BranchSet<T>], mode: Mode) -> Result<McbOutput<T>> {
        let first = batch.first().ok_or(TensorError::InvalidArgument {
            op: "mcb_forward",
            reason: "empty batch".into(),
        })?;
        let branches = first.branches();
        if batch.iter().any(|s| s.branches() != branches) {
            return Err(TensorError::InvalidArgument {
                op: "mcb_forward",
                reason: "items of a batch carry different branches".into(),
            });
        }
        let mut out = McbOutput {
            embeddings: vec![BTreeMap::new(); batch.len()],
            logits: vec![BTreeMap::new(); batch.len()],
            caches: BTreeMap::new(),
        };
        for b in branches {
            let head = self.heads.get(&b).ok_or(TensorError::InvalidArgument {
                op: "mcb_forward",
                reason: format!("no head for branch {}", b.as_str()),
            })?;
            let maps: Vec<&Tensor<T>> = batch.iter().map(|s| &s.maps[&b]).collect();
            let (embs, cache) = head.extract(&maps, mode)?;
            for (k, e) in embs.into_iter().enumerate() {
                if mode == Mode::Train {
                    out.logits[k].insert(b, head.classify(&e)?);
                }
                out.embeddings[k].insert(b, e);
            }
            out.caches.insert(b, cache);
        }
        Ok(out)
    }

    /// Returns per-item gradients with respect to the branch maps. Missing
    /// embedding gradients count as zero; missing logit gradients skip the
    /// classifier.
    pub fn backward(
        &mut self,
        caches: &BTreeMap<Branch, HeadCache<T>>,
        grad_embeddings: &[BTreeMap<Branch, Tensor<T>>],
        grad_logits: &[BTreeMap<Branch, Tensor<T>>],
    ) -> Result<Vec<BranchSet<T>>> {
        let n = grad_embeddings.len();
        let d = self.config.embed_dim;
        let mut out: Vec<BranchSet<T>> = (0..n).map(|_| BranchSet { maps: BTreeMap::new() }).collect();
        for (b, cache) in caches {
            let head = self.heads.get_mut(b).expect("head per branch");
            let ge: Vec<Tensor<T>> = grad_embeddings
                .iter()
                .map(|g| g.get(b).cloned().unwrap_or_else(|| Tensor::zeros(&[d])))
                .collect();
            let gl: Vec<Tensor<T>> = if grad_logits.iter().all(|g| g.contains_key(b)) {
                grad_logits.iter().map(|g| g[b].clone()).collect()
            } else {
                Vec::new()
            };
            for (k, g) in head.backward(cache, &ge, &gl)?.into_iter().enumerate() {
                out[k].maps.insert(*b, g);
            }
        }
        Ok(out)
    }

    pub fn update_running_stats(&mut self, caches: &BTreeMap<Branch, HeadCache<T>>) {
        for (b, c) in caches {
            if let Some(h) = self.heads.get_mut(b) {
                h.update_running_stats(&c.linear);
            }
        }
    }

    pub fn buffers(&self) -> Vec<&Parameter<T>> {
        self.heads
            .values()
            .flat_map(|h| [&h.running_mean, &h.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.heads
            .values_mut()
            .flat_map(|h| [&mut h.running_mean, &mut h.running_var])
            .collect()
    }
}

impl<T: Scalar> Parametrized<T> for Mcb<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        self.heads.values().flat_map(|h| h.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.heads.values_mut().flat_map(|h| h.params_mut()).collect()
    }
}

/// Per-branch logits in train mode, or the concatenated descriptor in test mode.
#[derive(Debug, Clone)]
pub enum McbResult<T> {
    Logits(BTreeMap<Branch, Tensor<T>>),
    Descriptor(Vec<T>),
}

/// One result per batch item.
pub fn mcb_forward<T: Scalar>(batch: &[BranchSet<T>], mcb: &Mcb<T>, mode: Mode) -> Result<Vec<McbResult<T>>> {
    let out = mcb.forward(batch, mode)?;
    Ok((0..batch.len())
        .map(|k| match mode {
            Mode::Train => McbResult::Logits(out.logits[k].clone()),
            Mode::Test => McbResult::Descriptor(out.concatenated(k)),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (Mcb<f64>, BranchSet<f64>) {
        let mcb = Mcb::new(4, McbConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let maps = Branch::ALL
            .into_iter()
            .map(|b| (b, Tensor::from_fn(&[3, 3, 4], |i| (i as f64 + b as usize as f64).sin())))
            .collect();
        (mcb, BranchSet { maps })
    }

    fn descriptor(mcb: &Mcb<f64>, set: &BranchSet<f64>) -> Vec<f64> {
        match mcb_forward(std::slice::from_ref(set), mcb, Mode::Test)
            .unwrap()
            .remove(0)
        {
            McbResult::Descriptor(d) => d,
            McbResult::Logits(_) => panic!("test mode yields a descriptor"),
        }
    }

    #[test]
    fn descriptor_length_and_zero_case() {
        let (mut mcb, set) = setup();
        assert_eq!(descriptor(&mcb, &set).len(), 96);
        for h in mcb.heads.values_mut() {
            h.embed_b.value.fill(0.0);
        }
        let zeros = BranchSet {
            maps: set.maps.keys().map(|&b| (b, Tensor::zeros(&[3, 3, 4]))).collect(),
        };
        assert!(descriptor(&mcb, &zeros).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_does_not_touch_descriptor() {
        let (mut mcb, set) = setup();
        let before = descriptor(&mcb, &set);
        for h in mcb.heads.values_mut() {
            h.cls_w.value.fill(0.0);
            h.cls_b.value.fill(7.0);
        }
        assert_eq!(before, descriptor(&mcb, &set));
    }

    #[test]
    fn train_mode_needs_a_batch() {
        let (mcb, set) = setup();
        assert!(mcb.forward(std::slice::from_ref(&set), Mode::Train).is_err());
        let out = mcb.forward(&[set.clone(), set], Mode::Train).unwrap();
        assert_eq!(out.logits[0][&Branch::Hf].len(), 20);
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let (mut mcb, _) = setup();
        let head = mcb.heads.get_mut(&Branch::Orig).unwrap();
        head.update_running_stats(&[Tensor::full(&[32], 2.0), Tensor::full(&[32], 4.0)]);
        assert!((head.running_mean.value.data()[0] - 0.3).abs() < 1e-12);
        assert!((head.running_var.value.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
