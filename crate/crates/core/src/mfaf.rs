//! Multi-scale frequency attention fusion.
//!
//! A feature map `F ∈ H × W × C` is split into three branches:
//!
//! * **LF** – `Σᵢ AvgPool_{kᵢ}(F) ⊗ ωᵢ` for `k = 3, 5, 7`, with `ωᵢ` learnable
//!   per-channel weights.
//! * **HF** – four directional Sobel responses `Sᵢ = |conv(F, Kᵢ)|` are
//!   concatenated into `S^C ∈ H × W × 4C`. A squeeze-excite path
//!   (global mean → 1×1 reduce → relu → 1×1 expand → sigmoid) yields one weight
//!   per `4C` channel, `W_edge`. The weighted responses are summed over the
//!   four direction groups back to `C` channels.
//! * **orig** – `F` itself.
//!
//! Every branch then goes through its own frequency-aware spatial attention:
//! `z = pool_c(F_m)`, `W_freq = σ(W₂ · relu(W₁ · z))`, `f_m = F_m ⊙ W_freq`.
//!
//! The HF and LF branches can be switched off; orig is always present.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::init::{fan_in_uniform, Parametrized};
use crate::tensor::{
    avgpool_same, avgpool_same_backward, channel_pool, channel_pool_backward, concat_channels,
    concat_channels_backward, conv1x1, conv1x1_backward, conv2d_fixed, conv2d_fixed_backward, global_avgpool,
    global_avgpool_backward, group_sum_channels, group_sum_channels_backward, mul, mul_backward, pointwise,
    pointwise_backward, scale_channels, scale_channels_backward, ChannelPoolMode, Padding, Parameter, Result, Scalar,
    Tensor, TensorError, Unary,
};

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
pub const SOBEL_XY: [[f64; 3]; 3] = [[-2.0, -1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 1.0, 2.0]];
pub const SOBEL_YX: [[f64; 3]; 3] = [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]];

/// The four directional kernels in concatenation order x, y, xy, yx.
pub const SOBEL_KERNELS: [[[f64; 3]; 3]; 4] = [SOBEL_X, SOBEL_Y, SOBEL_XY, SOBEL_YX];

/// Average-pooling window sizes of the low-frequency branch.
pub const POOL_SIZES: [usize; 3] = [3, 5, 7];

/// Border mode of the Sobel convolutions. Replicating the edge keeps the
/// response of a spatially constant map at exactly zero.
pub const EDGE_PADDING: Padding = Padding::Replicate;

pub fn kernel_tensor<T: Scalar>(k: &[[f64; 3]; 3]) -> Tensor<T> {
    Tensor::new(vec![3, 3], k.iter().flatten().map(|&v| T::lit(v)).collect()).expect("3x3 kernel")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Orig,
    Lf,
    Hf,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Orig, Branch::Lf, Branch::Hf];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Orig => "orig",
            Branch::Lf => "lf",
            Branch::Hf => "hf",
        }
    }
}

/// Channel statistics fed to the spatial attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Channel mean and channel max.
    #[default]
    Zpool,
    /// Adaptive average pooling of the channel axis into two bins.
    Aap,
    /// Channel mean only.
    Ap,
    /// Channel max only.
    Mp,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Zpool, Pooling::Aap, Pooling::Ap, Pooling::Mp];

    pub fn mode(self) -> ChannelPoolMode {
        match self {
            Pooling::Zpool => ChannelPoolMode::Both,
            Pooling::Aap => ChannelPoolMode::AdaptiveMean(2),
            Pooling::Ap => ChannelPoolMode::Mean,
            Pooling::Mp => ChannelPoolMode::Max,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Zpool => "zpool",
            Pooling::Aap => "aap",
            Pooling::Ap => "ap",
            Pooling::Mp => "mp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfafConfig {
    pub hf_branch: bool,
    pub lf_branch: bool,
    pub pooling: Pooling,
    /// `4C → 4C / edge_reduction` in the W_edge squeeze path.
    pub edge_reduction: usize,
    /// `z → C / fsa_reduction` in the spatial attention.
    pub fsa_reduction: usize,
}

impl Default for MfafConfig {
    fn default() -> Self {
        Self {
            hf_branch: true,
            lf_branch: true,
            pooling: Pooling::Zpool,
            edge_reduction: 4,
            fsa_reduction: 4,
        }
    }
}

impl MfafConfig {
    /// Active branches in output order.
    pub fn branches(&self) -> Vec<Branch> {
        Branch::ALL
            .into_iter()
            .filter(|b| match b {
                Branch::Orig => true,
                Branch::Lf => self.lf_branch,
                Branch::Hf => self.hf_branch,
            })
            .collect()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let check = |what: &str, r: usize, n: usize| {
            if r == 0 || !n.is_multiple_of(r) || n / r == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "mfaf",
                    reason: format!("{what} reduction {r} does not divide {n} channels"),
                });
            }
            Ok(())
        };
        check("edge", self.edge_reduction, 4 * channels)?;
        check("attention", self.fsa_reduction, channels)
    }
}

/// Learnable weights of the multi-frequency block.
#[derive(Debug, Clone)]
pub struct MfbParams<T> {
    pub channels: usize,
    /// One per-channel weight vector per pooling scale in [`POOL_SIZES`].
    pub scale_weights: [Parameter<T>; 3],
    pub edge_reduce_w: Parameter<T>,
    pub edge_reduce_b: Parameter<T>,
    pub edge_expand_w: Parameter<T>,
    pub edge_expand_b: Parameter<T>,
}

impl<T: Scalar> MfbParams<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let wide = 4 * channels;
        if reduction == 0 || !wide.is_multiple_of(reduction) {
            return Err(TensorError::InvalidArgument {
                op: "MfbParams",
                reason: format!("reduction {reduction} does not divide {wide}"),
            });
        }
        let narrow = wide / reduction;
        let third = T::lit(1.0 / 3.0);
        let scale = |i: usize| {
            Parameter::new(
                format!("mfaf.lf.scale{}", POOL_SIZES[i]),
                Tensor::full(&[channels], third),
            )
        };
        Ok(Self {
            channels,
            scale_weights: [scale(0), scale(1), scale(2)],
            edge_reduce_w: Parameter::new("mfaf.hf.reduce.weight", fan_in_uniform(rng, &[narrow, wide], wide)),
            edge_reduce_b: Parameter::new("mfaf.hf.reduce.bias", Tensor::zeros(&[narrow])),
            edge_expand_w: Parameter::new("mfaf.hf.expand.weight", fan_in_uniform(rng, &[wide, narrow], narrow)),
            edge_expand_b: Parameter::new("mfaf.hf.expand.bias", Tensor::zeros(&[wide])),
        })
    }

    fn check_channels(&self, input: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
        let (h, w, c) = input.dims3(op)?;
        if c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op,
                left: input.shape().to_vec(),
                right: vec![self.channels],
            });
        }
        Ok((h, w, c))
    }
}

impl<T: Scalar> Parametrized<T> for MfbParams<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.scale_weights.iter().collect();
        v.extend([
            &self.edge_reduce_w,
            &self.edge_reduce_b,
            &self.edge_expand_w,
            &self.edge_expand_b,
        ]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.scale_weights.iter_mut().collect();
        v.extend([
            &mut self.edge_reduce_w,
            &mut self.edge_reduce_b,
            &mut self.edge_expand_w,
            &mut self.edge_expand_b,
        ]);
        v
    }
}

#[derive(Debug, Clone)]
pub struct LowFreqCache<T> {
    pooled: [Tensor<T>; 3],
}

pub fn low_freq_forward<T: Scalar>(input: &Tensor<T>, params: &MfbParams<T>) -> Result<(Tensor<T>, LowFreqCache<T>)> {
    params.check_channels(input, "low_freq_branch")?;
    let pooled = [
        avgpool_same(input, POOL_SIZES[0])?,
        avgpool_same(input, POOL_SIZES[1])?,
        avgpool_same(input, POOL_SIZES[2])?,
    ];
    let mut out = scale_channels(&pooled[0], &params.scale_weights[0].value)?;
    for i in 1..3 {
        out.add_assign(&scale_channels(&pooled[i], &params.scale_weights[i].value)?)?;
    }
    Ok((out, LowFreqCache { pooled }))
}

/// `F_LF = Σᵢ AvgPool_{kᵢ}(F) ⊗ ωᵢ`.
pub fn low_freq_branch<T: Scalar>(input: &Tensor<T>, params: &MfbParams<T>) -> Result<Tensor<T>> {
    Ok(low_freq_forward(input, params)?.0)
}

/// Accumulates `ωᵢ` gradients and returns the gradient with respect to `F`.
pub fn low_freq_backward<T: Scalar>(
    params: &mut MfbParams<T>,
    cache: &LowFreqCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut grad_in: Option<Tensor<T>> = None;
    for i in 0..3 {
        let (g_pooled, g_scale) = scale_channels_backward(&cache.pooled[i], &params.scale_weights[i].value, grad_out)?;
        params.scale_weights[i].accumulate(&g_scale)?;
        let g = avgpool_same_backward(&g_pooled, POOL_SIZES[i])?;
        match grad_in.as_mut() {
            Some(acc) => acc.add_assign(&g)?,
            None => grad_in = Some(g),
        }
    }
    Ok(grad_in.expect("three scales"))
}

#[derive(Debug, Clone)]
pub struct HighFreqCache<T> {
    input_shape: Vec<usize>,
    raw: Vec<Tensor<T>>,
    abs: Vec<Tensor<T>>,
    concat: Tensor<T>,
    stats: Tensor<T>,
    reduced_pre: Tensor<T>,
    reduced: Tensor<T>,
    expanded: Tensor<T>,
    edge_weights: Tensor<T>,
}

impl<T: Scalar> HighFreqCache<T> {
    /// Per-channel edge weights `W_edge`, length `4C`.
    pub fn edge_weights(&self) -> &Tensor<T> {
        &self.edge_weights
    }

    /// Directional responses `S^C`, `H × W × 4C`.
    pub fn edge_responses(&self) -> &Tensor<T> {
        &self.concat
    }
}

pub fn high_freq_forward<T: Scalar>(input: &Tensor<T>, params: &MfbParams<T>) -> Result<(Tensor<T>, HighFreqCache<T>)> {
    let (_, _, c) = params.check_channels(input, "high_freq_branch")?;
    let mut raw = Vec::with_capacity(4);
    let mut abs = Vec::with_capacity(4);
    for k in &SOBEL_KERNELS {
        let r = conv2d_fixed(input, &kernel_tensor(k), true, EDGE_PADDING)?;
        abs.push(pointwise(&r, Unary::Abs));
        raw.push(r);
    }
    let concat = concat_channels(&abs.iter().collect::<Vec<_>>())?;
    let stats = global_avgpool(&concat)?.reshape(&[1, 1, 4 * c])?;
    let reduced_pre = conv1x1(&stats, &params.edge_reduce_w.value, &params.edge_reduce_b.value)?;
    let reduced = pointwise(&reduced_pre, Unary::Relu);
    let expanded = conv1x1(&reduced, &params.edge_expand_w.value, &params.edge_expand_b.value)?;
    let edge_weights = pointwise(&expanded, Unary::Sigmoid).reshape(&[4 * c])?;
    let weighted = scale_channels(&concat, &edge_weights)?;
    let out = group_sum_channels(&weighted, 4)?;
    Ok((
        out,
        HighFreqCache {
            input_shape: input.shape().to_vec(),
            raw,
            abs,
            concat,
            stats,
            reduced_pre,
            reduced,
            expanded,
            edge_weights,
        },
    ))
}

/// Edge-weighted four-direction Sobel magnitude, summed back to `C` channels.
pub fn high_freq_branch<T: Scalar>(input: &Tensor<T>, params: &MfbParams<T>) -> Result<Tensor<T>> {
    Ok(high_freq_forward(input, params)?.0)
}

pub fn high_freq_backward<T: Scalar>(
    params: &mut MfbParams<T>,
    cache: &HighFreqCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = params.channels;
    let g_weighted = group_sum_channels_backward(grad_out, 4)?;
    let (mut g_concat, g_edge) = scale_channels_backward(&cache.concat, &cache.edge_weights, &g_weighted)?;

    let g_edge = g_edge.reshape(&[1, 1, 4 * c])?;
    let sig = cache.edge_weights.clone().reshape(&[1, 1, 4 * c])?;
    let g_expanded = pointwise_backward(&cache.expanded, &sig, Unary::Sigmoid, &g_edge)?;
    let ge = conv1x1_backward(&cache.reduced, &params.edge_expand_w.value, &g_expanded)?;
    params.edge_expand_w.accumulate(&ge.weight)?;
    params.edge_expand_b.accumulate(&ge.bias)?;
    let g_reduced_pre = pointwise_backward(&cache.reduced_pre, &cache.reduced, Unary::Relu, &ge.input)?;
    let gr = conv1x1_backward(&cache.stats, &params.edge_reduce_w.value, &g_reduced_pre)?;
    params.edge_reduce_w.accumulate(&gr.weight)?;
    params.edge_reduce_b.accumulate(&gr.bias)?;
    let g_stats = gr.input.reshape(&[4 * c])?;
    g_concat.add_assign(&global_avgpool_backward(&g_stats, cache.concat.shape())?)?;

    let parts = concat_channels_backward(&g_concat, &[c; 4])?;
    let mut grad_in = Tensor::zeros(&cache.input_shape);
    for (i, g_abs) in parts.iter().enumerate() {
        let g_raw = pointwise_backward(&cache.raw[i], &cache.abs[i], Unary::Abs, g_abs)?;
        let k = kernel_tensor(&SOBEL_KERNELS[i]);
        grad_in.add_assign(&conv2d_fixed_backward(
            &cache.input_shape,
            &k,
            true,
            EDGE_PADDING,
            &g_raw,
        )?)?;
    }
    Ok(grad_in)
}

/// Spatial attention weights of one branch.
#[derive(Debug, Clone)]
pub struct FsaParams<T> {
    pub pooling: Pooling,
    /// `C / reduction × z-channels`.
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    /// `C × C / reduction`.
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

impl<T: Scalar> FsaParams<T> {
    pub fn new(
        prefix: &str,
        channels: usize,
        reduction: usize,
        pooling: Pooling,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
            return Err(TensorError::InvalidArgument {
                op: "fsa",
                reason: format!("reduction {reduction} does not divide {channels} channels"),
            });
        }
        let mid = channels / reduction;
        let zc = pooling.mode().out_channels();
        Ok(Self {
            pooling,
            w1: Parameter::new(format!("{prefix}.w1.weight"), fan_in_uniform(rng, &[mid, zc], zc)),
            b1: Parameter::new(format!("{prefix}.w1.bias"), Tensor::zeros(&[mid])),
            w2: Parameter::new(
                format!("{prefix}.w2.weight"),
                fan_in_uniform(rng, &[channels, mid], mid),
            ),
            b2: Parameter::new(format!("{prefix}.w2.bias"), Tensor::zeros(&[channels])),
        })
    }
}

impl<T: Scalar> Parametrized<T> for FsaParams<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone)]
pub struct FsaCache<T> {
    input: Tensor<T>,
    z: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
    logits: Tensor<T>,
    weights: Tensor<T>,
}

impl<T: Scalar> FsaCache<T> {
    /// `W_freq`, `H × W × C`, strictly inside (0, 1).
    pub fn attention(&self) -> &Tensor<T> {
        &self.weights
    }
}

pub fn fsa_forward<T: Scalar>(input: &Tensor<T>, params: &FsaParams<T>) -> Result<(Tensor<T>, FsaCache<T>)> {
    let (_, _, c) = input.dims3("fsa")?;
    if params.w2.value.shape()[0] != c {
        return Err(TensorError::ShapeMismatch {
            op: "fsa",
            left: input.shape().to_vec(),
            right: params.w2.value.shape().to_vec(),
        });
    }
    let z = channel_pool(input, params.pooling.mode())?;
    let hidden_pre = conv1x1(&z, &params.w1.value, &params.b1.value)?;
    let hidden = pointwise(&hidden_pre, Unary::Relu);
    let logits = conv1x1(&hidden, &params.w2.value, &params.b2.value)?;
    let weights = pointwise(&logits, Unary::Sigmoid);
    let out = mul(input, &weights)?;
    Ok((
        out,
        FsaCache {
            input: input.clone(),
            z,
            hidden_pre,
            hidden,
            logits,
            weights,
        },
    ))
}

/// `F ⊙ σ(W₂ · relu(W₁ · pool_c(F)))`.
pub fn fsa<T: Scalar>(input: &Tensor<T>, params: &FsaParams<T>) -> Result<Tensor<T>> {
    Ok(fsa_forward(input, params)?.0)
}

pub fn fsa_backward<T: Scalar>(
    params: &mut FsaParams<T>,
    cache: &FsaCache<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (mut g_input, g_weights) = mul_backward(&cache.input, &cache.weights, grad_out)?;
    let g_logits = pointwise_backward(&cache.logits, &cache.weights, Unary::Sigmoid, &g_weights)?;
    let g2 = conv1x1_backward(&cache.hidden, &params.w2.value, &g_logits)?;
    params.w2.accumulate(&g2.weight)?;
    params.b2.accumulate(&g2.bias)?;
    let g_hidden_pre = pointwise_backward(&cache.hidden_pre, &cache.hidden, Unary::Relu, &g2.input)?;
    let g1 = conv1x1_backward(&cache.z, &params.w1.value, &g_hidden_pre)?;
    params.w1.accumulate(&g1.weight)?;
    params.b1.accumulate(&g1.bias)?;
    g_input.add_assign(&channel_pool_backward(&cache.input, params.pooling.mode(), &g1.input)?)?;
    Ok(g_input)
}

/// Branch feature maps keyed and ordered by [`Branch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet<T> {
    pub maps: BTreeMap<Branch, Tensor<T>>,
}

impl<T: Scalar> BranchSet<T> {
    pub fn get(&self, b: Branch) -> Option<&Tensor<T>> {
        self.maps.get(&b)
    }

    pub fn branches(&self) -> Vec<Branch> {
        self.maps.keys().copied().collect()
    }
}

/// The complete fusion module: shared multi-frequency block plus one
/// independent attention per branch.
#[derive(Debug, Clone)]
pub struct Mfaf<T> {
    pub config: MfafConfig,
    pub mfb: MfbParams<T>,
    pub fsa: BTreeMap<Branch, FsaParams<T>>,
}

#[derive(Debug, Clone)]
pub struct MfafCache<T> {
    lf: Option<LowFreqCache<T>>,
    hf: Option<HighFreqCache<T>>,
    fsa: BTreeMap<Branch, FsaCache<T>>,
}

impl<T: Scalar> MfafCache<T> {
    pub fn high_freq(&self) -> Option<&HighFreqCache<T>> {
        self.hf.as_ref()
    }

    pub fn attention(&self, b: Branch) -> Option<&FsaCache<T>> {
        self.fsa.get(&b)
    }
}

impl<T: Scalar> Mfaf<T> {
    /// Parameters for all three branches are created even when a branch is
    /// switched off, so checkpoints keep one layout.
    pub fn new(channels: usize, config: MfafConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(channels)?;
        let mfb = MfbParams::new(channels, config.edge_reduction, rng)?;
        let mut fsa = BTreeMap::new();
        for b in Branch::ALL {
            let prefix = format!("mfaf.fsa.{}", b.as_str());
            fsa.insert(
                b,
                FsaParams::new(&prefix, channels, config.fsa_reduction, config.pooling, rng)?,
            );
        }
        Ok(Self { config, mfb, fsa })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(BranchSet<T>, MfafCache<T>)> {
        let mut maps = BTreeMap::new();
        let mut cache = MfafCache {
            lf: None,
            hf: None,
            fsa: BTreeMap::new(),
        };
        for b in self.config.branches() {
            let pre = match b {
                Branch::Orig => input.clone(),
                Branch::Lf => {
                    let (t, c) = low_freq_forward(input, &self.mfb)?;
                    cache.lf = Some(c);
                    t
                }
                Branch::Hf => {
                    let (t, c) = high_freq_forward(input, &self.mfb)?;
                    cache.hf = Some(c);
                    t
                }
            };
            let (out, fc) = fsa_forward(&pre, &self.fsa[&b])?;
            cache.fsa.insert(b, fc);
            maps.insert(b, out);
        }
        Ok((BranchSet { maps }, cache))
    }

    /// Accumulates parameter gradients in branch order orig, LF, HF and returns
    /// the gradient with respect to the input map.
    pub fn backward(&mut self, cache: &MfafCache<T>, grads: &BranchSet<T>) -> Result<Tensor<T>> {
        let mut grad_in: Option<Tensor<T>> = None;
        for (b, g) in &grads.maps {
            let fc = cache.fsa.get(b).ok_or(TensorError::InvalidArgument {
                op: "mfaf_backward",
                reason: format!("no forward cache for branch {}", b.as_str()),
            })?;
            let fsa = self.fsa.get_mut(b).expect("all branches have attention");
            let g_pre = fsa_backward(fsa, fc, g)?;
            let g_in = match b {
                Branch::Orig => g_pre,
                Branch::Lf => low_freq_backward(&mut self.mfb, cache.lf.as_ref().expect("lf cache"), &g_pre)?,
                Branch::Hf => high_freq_backward(&mut self.mfb, cache.hf.as_ref().expect("hf cache"), &g_pre)?,
            };
            match grad_in.as_mut() {
                Some(acc) => acc.add_assign(&g_in)?,
                None => grad_in = Some(g_in),
            }
        }
        grad_in.ok_or(TensorError::InvalidArgument {
            op: "mfaf_backward",
            reason: "no branch gradients".into(),
        })
    }
}

/// Three-branch output `{orig, LF, HF}` for a single map, minus disabled branches.
pub fn mfaf_forward<T: Scalar>(input: &Tensor<T>, module: &Mfaf<T>) -> Result<BranchSet<T>> {
    Ok(module.forward(input)?.0)
}

impl<T: Scalar> Parametrized<T> for Mfaf<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.mfb.params();
        for f in self.fsa.values() {
            v.extend(f.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.mfb.params_mut();
        for f in self.fsa.values_mut() {
            v.extend(f.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_fsa(m: &mut Mfaf<f64>) {
        for f in m.fsa.values_mut() {
            for p in f.params_mut() {
                p.value.fill(0.0);
            }
        }
    }

    #[test]
    fn lf_zero_weights_and_constant_map() {
        let mut p = MfbParams::<f64>::new(3, 4, &mut rng()).unwrap();
        let f = Tensor::full(&[5, 6, 3], 1.25);
        for w in &mut p.scale_weights {
            w.value.fill(0.0);
        }
        assert!(low_freq_branch(&f, &p).unwrap().data().iter().all(|&v| v == 0.0));
        for w in &mut p.scale_weights {
            w.value.fill(1.0);
        }
        let out = low_freq_branch(&f, &p).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.75).abs() < 1e-12));
        assert!(low_freq_branch(&Tensor::full(&[5, 6, 2], 1.0), &p).is_err());
    }

    #[test]
    fn hf_constant_input_is_exactly_zero() {
        let p = MfbParams::<f64>::new(2, 4, &mut rng()).unwrap();
        let out = high_freq_branch(&Tensor::full(&[6, 6, 2], -3.5), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hf_vertical_step() {
        let f = Tensor::from_fn(&[6, 6, 1], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let sx = conv2d_fixed(&f, &kernel_tensor::<f64>(&SOBEL_X), true, EDGE_PADDING).unwrap();
        let sy = conv2d_fixed(&f, &kernel_tensor::<f64>(&SOBEL_Y), true, EDGE_PADDING).unwrap();
        for y in 1..5 {
            // Columns 2 and 3 straddle the step.
            assert_eq!(sx.data()[y * 6 + 2].abs(), 4.0);
            assert_eq!(sx.data()[y * 6 + 3].abs(), 4.0);
            assert_eq!(sy.data()[y * 6 + 2], 0.0);
        }
    }

    #[test]
    fn hf_with_zero_squeeze_weights_halves_the_edge_sum() {
        let mut p = MfbParams::<f64>::new(2, 4, &mut rng()).unwrap();
        for q in [
            &mut p.edge_reduce_w,
            &mut p.edge_reduce_b,
            &mut p.edge_expand_w,
            &mut p.edge_expand_b,
        ] {
            q.value.fill(0.0);
        }
        let f = Tensor::from_fn(&[4, 5, 2], |i| ((i * 13) % 7) as f64 - 3.0);
        let out = high_freq_branch(&f, &p).unwrap();
        let mut expect = Tensor::zeros(&[4, 5, 2]);
        for k in &SOBEL_KERNELS {
            let r = conv2d_fixed(&f, &kernel_tensor(k), true, EDGE_PADDING).unwrap();
            expect.add_assign(&pointwise(&r, Unary::Abs)).unwrap();
        }
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn fsa_zero_expand_halves_input() {
        let mut p = FsaParams::<f64>::new("t", 4, 2, Pooling::Zpool, &mut rng()).unwrap();
        p.w2.value.fill(0.0);
        p.b2.value.fill(0.0);
        let f = Tensor::from_fn(&[3, 3, 4], |i| i as f64 * 0.1 - 1.0);
        let out = fsa(&f, &p).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(FsaParams::<f64>::new("t", 4, 3, Pooling::Zpool, &mut rng()).is_err());
    }

    #[test]
    fn zeroed_attention_halves_every_branch() {
        let mut m = Mfaf::<f64>::new(4, MfafConfig::default(), &mut rng()).unwrap();
        zero_fsa(&mut m);
        let f = Tensor::from_fn(&[5, 5, 4], |i| ((i * 31) % 17) as f64 / 17.0);
        let set = mfaf_forward(&f, &m).unwrap();
        assert_eq!(set.branches(), vec![Branch::Orig, Branch::Lf, Branch::Hf]);
        let lf = low_freq_branch(&f, &m.mfb).unwrap();
        let hf = high_freq_branch(&f, &m.mfb).unwrap();
        for (got, base) in [
            (set.get(Branch::Orig).unwrap(), &f),
            (set.get(Branch::Lf).unwrap(), &lf),
            (set.get(Branch::Hf).unwrap(), &hf),
        ] {
            assert_eq!(got.shape(), f.shape());
            for (a, b) in got.data().iter().zip(base.data()) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    #[test]
    fn branch_toggles_drop_outputs() {
        let cfg = MfafConfig {
            hf_branch: false,
            ..MfafConfig::default()
        };
        let m = Mfaf::<f64>::new(4, cfg, &mut rng()).unwrap();
        let f = Tensor::full(&[4, 4, 4], 0.3);
        assert_eq!(mfaf_forward(&f, &m).unwrap().branches(), vec![Branch::Orig, Branch::Lf]);
    }

    #[test]
    fn pooling_variants_change_only_z_width() {
        for pooling in Pooling::ALL {
            let cfg = MfafConfig {
                pooling,
                ..MfafConfig::default()
            };
            let m = Mfaf::<f64>::new(8, cfg, &mut rng()).unwrap();
            let zc = pooling.mode().out_channels();
            assert_eq!(m.fsa[&Branch::Orig].w1.value.shape(), &[2, zc]);
            let f = Tensor::from_fn(&[4, 4, 8], |i| (i as f64).cos());
            let set = mfaf_forward(&f, &m).unwrap();
            assert!(set.maps.values().all(|t| t.shape() == [4, 4, 8]));
        }
    }
}
