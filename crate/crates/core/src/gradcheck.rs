//! Finite-difference verification of every analytic backward pass.
//!
//! Each registered operation builds random 64-bit instances. An instance is a
//! flat input vector `x`, a scalar function `f(x)` (usually the operation's
//! output projected onto a fixed random direction) and the analytic gradient
//! of `f` at `x`. A coordinate passes when the central difference agrees with
//! the analytic value to within the relative tolerance.
//!
//! Coordinates that sit within one step of a non-differentiable point (relu,
//! abs, max, hinge, or a switch in batch-hard mining) are detected from the
//! function values alone: if the left and right one-sided slopes disagree by
//! more than the tolerance, the coordinate is counted as skipped. This never
//! looks at the analytic gradient, so a wrong backward pass cannot hide
//! behind it.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig, View};
use crate::data::derive_seed;
use crate::error::Result;
use crate::heads::{Mcb, McbConfig, Mode};
use crate::init::Parametrized;
use crate::loss::{batch_loss, cross_entropy_with_grad, triplet_with_grad, Distance, LossItem, Mining, TripletConfig};
use crate::mfaf::{
    fsa_backward, fsa_forward, high_freq_backward, high_freq_forward, kernel_tensor, low_freq_backward,
    low_freq_forward, Branch, BranchSet, FsaParams, Mfaf, MfafConfig, MfbParams, Pooling, SOBEL_KERNELS,
};
use crate::model::{Model, ModelConfig};
use crate::tensor::{
    add, avgpool_same, avgpool_same_backward, channel_pool, channel_pool_backward, concat_channels,
    concat_channels_backward, conv1x1, conv1x1_backward, conv2d_fixed, conv2d_fixed_backward, global_avgpool,
    global_avgpool_backward, group_sum_channels, group_sum_channels_backward, linear, linear_backward, log_softmax,
    log_softmax_backward, mul, mul_backward, pointwise, pointwise_backward, scale_channels, scale_channels_backward,
    ChannelPoolMode, Padding, Tensor, Unary,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// analytically and numerically compare as equal.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Largest share of coordinates of one operation that may be skipped as kinks.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per instance; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: 48,
            seed: 0,
        }
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> Result<f64>>;

/// A point, a scalar function and its claimed gradient at that point.
pub struct Instance {
    pub x: Vec<f64>,
    pub grad: Vec<f64>,
    pub f: ScalarFn,
}

impl Instance {
    pub fn new(x: Vec<f64>, grad: Vec<f64>, f: impl Fn(&[f64]) -> Result<f64> + 'static) -> Self {
        Self {
            x,
            grad,
            f: Box::new(f),
        }
    }
}

pub type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Instance> + Send + Sync>;

pub struct GradOp {
    pub name: &'static str,
    pub build: Builder,
}

impl GradOp {
    pub fn new(
        name: &'static str,
        build: impl Fn(&mut ChaCha8Rng) -> Result<Instance> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            build: Box::new(build),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when building or evaluating an instance failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub ops: Vec<OpReport>,
    /// Wall-clock seconds; not part of any result file.
    #[serde(skip)]
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect()
    }

    pub const CSV_HEADER: &'static str = "op,instances,checked,skipped,max_rel_error,status";

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for o in &self.ops {
            s += &format!(
                "{},{},{},{},{:.3e},{}\n",
                o.name,
                o.instances,
                o.checked,
                o.skipped,
                o.max_rel_error,
                if o.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

fn op_seed(seed: u64, name: &str) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    derive_seed(seed, h)
}

/// Checks one operation over `cfg.instances` random instances.
pub fn check_op(op: &GradOp, cfg: &GradcheckConfig) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(op_seed(cfg.seed, op.name));
    let mut report = OpReport {
        name: op.name.to_string(),
        instances: 0,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        passed: true,
        error: None,
    };
    let h = cfg.step;
    for _ in 0..cfg.instances {
        let outcome = (|| -> Result<()> {
            let inst = (op.build)(&mut rng)?;
            assert_eq!(inst.x.len(), inst.grad.len(), "{}: gradient length", op.name);
            let n = inst.x.len();
            let coords: Vec<usize> = if n > cfg.max_coords {
                let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
                c.sort_unstable();
                c
            } else {
                (0..n).collect()
            };
            let f0 = (inst.f)(&inst.x)?;
            let mut x = inst.x.clone();
            for i in coords {
                x[i] = inst.x[i] + h;
                let fp = (inst.f)(&x)?;
                x[i] = inst.x[i] - h;
                let fm = (inst.f)(&x)?;
                x[i] = inst.x[i];
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                if (right - left).abs() > cfg.tolerance * right.abs().max(left.abs()).max(RELATIVE_FLOOR) * 2.0
                    && (right - left).abs() > 1e-7
                {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let e = relative_error(inst.grad[i], numeric);
                report.checked += 1;
                if !(e <= report.max_rel_error) {
                    report.max_rel_error = e;
                }
            }
            Ok(())
        })();
        report.instances += 1;
        if let Err(e) = outcome {
            report.error = Some(e.to_string());
            report.passed = false;
            return report;
        }
    }
    let total = report.checked + report.skipped;
    report.passed = report.max_rel_error <= cfg.tolerance
        && report.checked > 0
        && (report.skipped as f64) <= MAX_SKIP_FRACTION * total as f64;
    report
}

pub fn run(ops: &[GradOp], cfg: &GradcheckConfig) -> GradcheckReport {
    let start = Instant::now();
    let ops = ops.iter().map(|op| check_op(op, cfg)).collect();
    GradcheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        instances: cfg.instances,
        ops,
        seconds: start.elapsed().as_secs_f64(),
    }
}

// Instance helpers.

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

fn map_shape(rng: &mut ChaCha8Rng, max_c: usize) -> Vec<usize> {
    vec![rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=max_c)]
}

fn flatten(ts: &[&Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn split(x: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), x[off..off + n].to_vec()).expect("shape matches length");
            off += n;
            t
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(a.dot(b)?)
}

/// Instance over a list of input tensors for `f(inputs) = <op(inputs), r>`.
fn projected(
    inputs: Vec<Tensor<f64>>,
    grads: Vec<Tensor<f64>>,
    op: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
    r: Tensor<f64>,
) -> Instance {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let x = flatten(&inputs.iter().collect::<Vec<_>>());
    let grad = flatten(&grads.iter().collect::<Vec<_>>());
    Instance::new(x, grad, move |x| dot(&op(&split(x, &shapes))?, &r))
}

fn unary(f: Unary) -> impl Fn(&mut ChaCha8Rng) -> Result<Instance> + Send + Sync {
    move |rng| {
        let s = map_shape(rng, 4);
        let scale = if f == Unary::Sigmoid { 4.0 } else { 1.0 };
        let x = uniform(rng, &s, -scale, scale);
        let y = pointwise(&x, f);
        let r = rand_t(rng, &s);
        let g = pointwise_backward(&x, &y, f, &r)?;
        Ok(projected(vec![x], vec![g], move |i| Ok(pointwise(&i[0], f)), r))
    }
}

/// Model-like instance: the parameters of a cloned module form `x`.
fn module_instance<M: Parametrized<f64> + Clone + 'static>(
    module: M,
    extra: Vec<Tensor<f64>>,
    grads_extra: Vec<Tensor<f64>>,
    f: impl Fn(&M, &[Tensor<f64>]) -> Result<f64> + 'static,
) -> Instance {
    let np = module.param_count();
    let mut x = module.flat_values();
    let mut grad = module.flat_grads();
    let shapes: Vec<Vec<usize>> = extra.iter().map(|t| t.shape().to_vec()).collect();
    x.extend(flatten(&extra.iter().collect::<Vec<_>>()));
    grad.extend(flatten(&grads_extra.iter().collect::<Vec<_>>()));
    Instance::new(x, grad, move |x| {
        let mut m = module.clone();
        m.set_flat_values(&x[..np]);
        f(&m, &split(&x[np..], &shapes))
    })
}

fn randomize<M: Parametrized<f64>>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    for p in m.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    m.zero_grads();
}

fn branch_maps(rng: &mut ChaCha8Rng, branches: &[Branch], shape: &[usize]) -> BranchSet<f64> {
    BranchSet {
        maps: branches.iter().map(|&b| (b, rand_t(rng, shape))).collect(),
    }
}

fn random_triplet_config(rng: &mut ChaCha8Rng) -> TripletConfig {
    TripletConfig {
        margin: rng.gen_range(0.2..1.5),
        distance: if rng.gen_bool(0.5) {
            Distance::Euclidean
        } else {
            Distance::Cosine
        },
        mining: if rng.gen_bool(0.5) {
            Mining::BatchAll
        } else {
            Mining::BatchHard
        },
    }
}

/// `(view, class)` labels: `classes` scenes, each with one satellite and
/// `drones` drone images.
fn batch_labels(classes: u32, drones: usize) -> Vec<(View, u32)> {
    let mut v = Vec::new();
    for c in 0..classes {
        v.push((View::Satellite, c));
        v.extend(std::iter::repeat_n((View::Drone, c), drones));
    }
    v
}

fn random_mfaf_config(rng: &mut ChaCha8Rng) -> MfafConfig {
    MfafConfig {
        hf_branch: rng.gen_bool(0.7),
        lf_branch: rng.gen_bool(0.7),
        pooling: Pooling::ALL[rng.gen_range(0..4)],
        edge_reduction: 4,
        fsa_reduction: 2,
    }
}

/// Every differentiable operation, each exactly once.
pub fn registry() -> Vec<GradOp> {
    vec![
        GradOp::new("conv2d_fixed", |rng| {
            let s = map_shape(rng, 3);
            let kernel = kernel_tensor::<f64>(&SOBEL_KERNELS[rng.gen_range(0..4)]);
            let grouped = rng.gen_bool(0.5);
            let padding = if rng.gen_bool(0.5) {
                Padding::Zero
            } else {
                Padding::Replicate
            };
            let x = rand_t(rng, &s);
            let out_shape = conv2d_fixed(&x, &kernel, grouped, padding)?.shape().to_vec();
            let r = rand_t(rng, &out_shape);
            let g = conv2d_fixed_backward(&s, &kernel, grouped, padding, &r)?;
            Ok(projected(
                vec![x],
                vec![g],
                move |i| Ok(conv2d_fixed(&i[0], &kernel, grouped, padding)?),
                r,
            ))
        }),
        GradOp::new("conv1x1", |rng| {
            let s = map_shape(rng, 4);
            let cout = rng.gen_range(1..=4);
            let (x, w, b) = (rand_t(rng, &s), rand_t(rng, &[cout, s[2]]), rand_t(rng, &[cout]));
            let r = rand_t(rng, &[s[0], s[1], cout]);
            let g = conv1x1_backward(&x, &w, &r)?;
            Ok(projected(
                vec![x, w, b],
                vec![g.input, g.weight, g.bias],
                |i| Ok(conv1x1(&i[0], &i[1], &i[2])?),
                r,
            ))
        }),
        GradOp::new("avgpool_same", |rng| {
            let s = map_shape(rng, 3);
            let k = [3, 5, 7][rng.gen_range(0..3)];
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &s);
            let g = avgpool_same_backward(&r, k)?;
            Ok(projected(vec![x], vec![g], move |i| Ok(avgpool_same(&i[0], k)?), r))
        }),
        GradOp::new("channel_pool", |rng| {
            let s = map_shape(rng, 6);
            let mode = match rng.gen_range(0..4) {
                0 => ChannelPoolMode::Mean,
                1 => ChannelPoolMode::Max,
                2 => ChannelPoolMode::Both,
                _ => ChannelPoolMode::AdaptiveMean(rng.gen_range(1..=s[2])),
            };
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &[s[0], s[1], mode.out_channels()]);
            let g = channel_pool_backward(&x, mode, &r)?;
            Ok(projected(vec![x], vec![g], move |i| Ok(channel_pool(&i[0], mode)?), r))
        }),
        GradOp::new("sigmoid", unary(Unary::Sigmoid)),
        GradOp::new("relu", unary(Unary::Relu)),
        GradOp::new("abs", unary(Unary::Abs)),
        GradOp::new("add", |rng| {
            let s = map_shape(rng, 3);
            let (a, b, r) = (rand_t(rng, &s), rand_t(rng, &s), rand_t(rng, &s));
            Ok(projected(
                vec![a, b],
                vec![r.clone(), r.clone()],
                |i| Ok(add(&i[0], &i[1])?),
                r,
            ))
        }),
        GradOp::new("mul", |rng| {
            let s = map_shape(rng, 3);
            let (a, b, r) = (rand_t(rng, &s), rand_t(rng, &s), rand_t(rng, &s));
            let (ga, gb) = mul_backward(&a, &b, &r)?;
            Ok(projected(vec![a, b], vec![ga, gb], |i| Ok(mul(&i[0], &i[1])?), r))
        }),
        GradOp::new("concat_channels", |rng| {
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let widths: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=3)).collect();
            let maps: Vec<Tensor<f64>> = widths.iter().map(|&c| rand_t(rng, &[h, w, c])).collect();
            let r = rand_t(rng, &[h, w, widths.iter().sum()]);
            let g = concat_channels_backward(&r, &widths)?;
            Ok(projected(
                maps,
                g,
                |i| Ok(concat_channels(&i.iter().collect::<Vec<_>>())?),
                r,
            ))
        }),
        GradOp::new("group_sum_channels", |rng| {
            let (h, w, c, groups) = (
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=3),
                rng.gen_range(1..=4),
            );
            let x = rand_t(rng, &[h, w, c * groups]);
            let r = rand_t(rng, &[h, w, c]);
            let g = group_sum_channels_backward(&r, groups)?;
            Ok(projected(
                vec![x],
                vec![g],
                move |i| Ok(group_sum_channels(&i[0], groups)?),
                r,
            ))
        }),
        GradOp::new("scale_channels", |rng| {
            let s = map_shape(rng, 4);
            let (x, k, r) = (rand_t(rng, &s), rand_t(rng, &[s[2]]), rand_t(rng, &s));
            let (gx, gk) = scale_channels_backward(&x, &k, &r)?;
            Ok(projected(
                vec![x, k],
                vec![gx, gk],
                |i| Ok(scale_channels(&i[0], &i[1])?),
                r,
            ))
        }),
        GradOp::new("global_avgpool", |rng| {
            let s = map_shape(rng, 4);
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &[s[2]]);
            let g = global_avgpool_backward(&r, &s)?;
            Ok(projected(vec![x], vec![g], |i| Ok(global_avgpool(&i[0])?), r))
        }),
        GradOp::new("linear", |rng| {
            let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let (x, w, b) = (rand_t(rng, &[n]), rand_t(rng, &[m, n]), rand_t(rng, &[m]));
            let r = rand_t(rng, &[m]);
            let g = linear_backward(&x, &w, &r)?;
            Ok(projected(
                vec![x, w, b],
                vec![g.input, g.weight, g.bias],
                |i| Ok(linear(&i[0], &i[1], &i[2])?),
                r,
            ))
        }),
        GradOp::new("log_softmax", |rng| {
            let n = rng.gen_range(2..=6);
            let x = uniform(rng, &[n], -3.0, 3.0);
            let r = rand_t(rng, &[n]);
            let g = log_softmax_backward(&log_softmax(&x)?, &r)?;
            Ok(projected(vec![x], vec![g], |i| Ok(log_softmax(&i[0])?), r))
        }),
        GradOp::new("backbone_encode", |rng| {
            let cfg = BackboneConfig {
                image_size: 4,
                patch: 2,
                channels: 3,
            };
            let mut bb = Backbone::<f64>::new(cfg, rng)?;
            randomize(&mut bb, rng, 0.3);
            let img = uniform(rng, &[4, 4, 3], 0.0, 1.0);
            let r = rand_t(rng, &cfg.output_shape());
            let (_, cache) = bb.forward(&img)?;
            bb.backward(&cache, &r)?;
            Ok(module_instance(bb, vec![], vec![], move |m, _| {
                dot(&m.encode(&img)?, &r)
            }))
        }),
        GradOp::new("low_freq_branch", |rng| {
            let s = map_shape(rng, 3);
            let mut p = MfbParams::<f64>::new(s[2], 4, rng)?;
            randomize(&mut p, rng, 0.5);
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &s);
            let (_, cache) = low_freq_forward(&x, &p)?;
            let gx = low_freq_backward(&mut p, &cache, &r)?;
            Ok(module_instance(p, vec![x], vec![gx], move |m, i| {
                dot(&low_freq_forward(&i[0], m)?.0, &r)
            }))
        }),
        GradOp::new("high_freq_branch", |rng| {
            let s = map_shape(rng, 3);
            let mut p = MfbParams::<f64>::new(s[2], 4, rng)?;
            randomize(&mut p, rng, 0.5);
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &s);
            let (_, cache) = high_freq_forward(&x, &p)?;
            let gx = high_freq_backward(&mut p, &cache, &r)?;
            Ok(module_instance(p, vec![x], vec![gx], move |m, i| {
                dot(&high_freq_forward(&i[0], m)?.0, &r)
            }))
        }),
        GradOp::new("fsa", |rng| {
            let c = [2, 4][rng.gen_range(0..2)];
            let s = vec![rng.gen_range(1..=4), rng.gen_range(1..=4), c];
            let pooling = Pooling::ALL[rng.gen_range(0..4)];
            let mut p = FsaParams::<f64>::new("fsa", c, 2, pooling, rng)?;
            randomize(&mut p, rng, 0.5);
            let x = rand_t(rng, &s);
            let r = rand_t(rng, &s);
            let (_, cache) = fsa_forward(&x, &p)?;
            let gx = fsa_backward(&mut p, &cache, &r)?;
            Ok(module_instance(p, vec![x], vec![gx], move |m, i| {
                dot(&fsa_forward(&i[0], m)?.0, &r)
            }))
        }),
        GradOp::new("mfaf_forward", |rng| {
            let s = vec![rng.gen_range(2..=4), rng.gen_range(2..=4), 2];
            let mut m = Mfaf::<f64>::new(2, random_mfaf_config(rng), rng)?;
            randomize(&mut m, rng, 0.3);
            let x = rand_t(rng, &s);
            let r = branch_maps(rng, &m.config.branches(), &s);
            let (_, cache) = m.forward(&x)?;
            let gx = m.backward(&cache, &r)?;
            Ok(module_instance(m, vec![x], vec![gx], move |m, i| {
                let (out, _) = m.forward(&i[0])?;
                let mut total = 0.0;
                for (b, t) in &out.maps {
                    total += dot(t, &r.maps[b])?;
                }
                Ok(total)
            }))
        }),
        GradOp::new("mcb_forward", |rng| {
            let c = rng.gen_range(1..=3);
            let shape = vec![2, 2, c];
            let cfg = McbConfig {
                embed_dim: 3,
                num_classes: 3,
                norm_affine: rng.gen_bool(0.5),
            };
            let mut mcb = Mcb::<f64>::new(c, cfg, rng)?;
            randomize(&mut mcb, rng, 0.3);
            let mut branches = vec![Branch::Orig];
            branches.extend([Branch::Lf, Branch::Hf].into_iter().filter(|_| rng.gen_bool(0.6)));
            let n = rng.gen_range(2..=4);
            let batch: Vec<BranchSet<f64>> = (0..n).map(|_| branch_maps(rng, &branches, &shape)).collect();
            let r_emb: Vec<BTreeMap<Branch, Tensor<f64>>> = (0..n)
                .map(|_| branches.iter().map(|&b| (b, rand_t(rng, &[3]))).collect())
                .collect();
            let r_log: Vec<BTreeMap<Branch, Tensor<f64>>> = (0..n)
                .map(|_| branches.iter().map(|&b| (b, rand_t(rng, &[3]))).collect())
                .collect();
            let out = mcb.forward(&batch, Mode::Train)?;
            let g = mcb.backward(&out.caches, &r_emb, &r_log)?;
            let inputs: Vec<Tensor<f64>> = batch.iter().flat_map(|s| s.maps.values().cloned()).collect();
            let grads: Vec<Tensor<f64>> = g.iter().flat_map(|s| s.maps.values().cloned()).collect();
            Ok(module_instance(mcb, inputs, grads, move |m, i| {
                let k = branches.len();
                let batch: Vec<BranchSet<f64>> = (0..n)
                    .map(|j| BranchSet {
                        maps: branches
                            .iter()
                            .copied()
                            .zip(i[j * k..(j + 1) * k].iter().cloned())
                            .collect(),
                    })
                    .collect();
                let out = m.forward(&batch, Mode::Train)?;
                let mut total = 0.0;
                for j in 0..n {
                    for b in &branches {
                        total += dot(&out.embeddings[j][b], &r_emb[j][b])?;
                        total += dot(&out.logits[j][b], &r_log[j][b])?;
                    }
                }
                Ok(total)
            }))
        }),
        GradOp::new("cross_entropy", |rng| {
            let n = rng.gen_range(2..=6);
            let class = rng.gen_range(0..n);
            let x = uniform(rng, &[n], -3.0, 3.0);
            let (_, g) = cross_entropy_with_grad(&x, class)?;
            Ok(Instance::new(x.data().to_vec(), g.into_data(), move |x| {
                Ok(cross_entropy_with_grad(&Tensor::vector(x.to_vec()), class)?.0)
            }))
        }),
        GradOp::new("cd_triplet", |rng| {
            let d = rng.gen_range(1..=5);
            let cfg = random_triplet_config(rng);
            let v: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, [ga, gp, gn]) = triplet_with_grad(&v[..d], &v[d..2 * d], &v[2 * d..], cfg.distance, cfg.margin);
            let grad = [ga, gp, gn].concat();
            Ok(Instance::new(v, grad, move |x| {
                Ok(triplet_with_grad(&x[..d], &x[d..2 * d], &x[2 * d..], cfg.distance, cfg.margin).0)
            }))
        }),
        GradOp::new("batch_loss", |rng| {
            let labels = batch_labels(rng.gen_range(2..=3), rng.gen_range(1..=2));
            let classes = 3;
            let dim = 3;
            let cfg = random_triplet_config(rng);
            let mut branches = vec![Branch::Orig];
            branches.extend([Branch::Lf, Branch::Hf].into_iter().filter(|_| rng.gen_bool(0.5)));
            let per_item = branches.len() * (dim + classes);
            let x: Vec<f64> = (0..labels.len() * per_item).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let items = move |x: &[f64]| -> Vec<LossItem<f64>> {
                labels
                    .iter()
                    .enumerate()
                    .map(|(k, &(view, class_id))| {
                        let mut off = k * per_item;
                        let mut take = |n: usize| {
                            let t = Tensor::vector(x[off..off + n].to_vec());
                            off += n;
                            t
                        };
                        let mut embeddings = BTreeMap::new();
                        let mut logits = BTreeMap::new();
                        for &b in &branches {
                            embeddings.insert(b, take(dim));
                            logits.insert(b, take(classes));
                        }
                        LossItem {
                            view,
                            class_id,
                            embeddings,
                            logits,
                        }
                    })
                    .collect()
            };
            let loss = batch_loss(&items(&x), &cfg)?;
            let mut grad = Vec::with_capacity(x.len());
            for (ge, gl) in loss.grad_embeddings.iter().zip(&loss.grad_logits) {
                for b in ge.keys() {
                    grad.extend_from_slice(ge[b].data());
                    grad.extend_from_slice(gl[b].data());
                }
            }
            Ok(Instance::new(x, grad, move |x| Ok(batch_loss(&items(x), &cfg)?.total)))
        }),
        GradOp::new("end_to_end", |rng| {
            let cfg = ModelConfig {
                backbone: BackboneConfig {
                    image_size: 8,
                    patch: 4,
                    channels: 4,
                },
                mfaf: random_mfaf_config(rng),
                mcb: McbConfig {
                    embed_dim: 4,
                    num_classes: 3,
                    norm_affine: rng.gen_bool(0.5),
                },
            };
            let mut model = Model::<f64>::new(&cfg, rng.gen())?;
            randomize(&mut model, rng, 0.1);
            let labels = batch_labels(2, 1);
            let images: Vec<Tensor<f64>> = labels.iter().map(|_| uniform(rng, &[8, 8, 3], 0.0, 1.0)).collect();
            let loss_cfg = random_triplet_config(rng);
            let run =
                move |m: &Model<f64>| -> Result<(f64, crate::model::ModelCache<f64>, crate::loss::BatchLoss<f64>)> {
                    let px: Vec<&Tensor<f64>> = images.iter().collect();
                    let (out, cache) = m.forward(&px, Mode::Train)?;
                    let items: Vec<LossItem<f64>> = labels
                        .iter()
                        .zip(out.embeddings.into_iter().zip(out.logits))
                        .map(|(&(view, class_id), (embeddings, logits))| LossItem {
                            view,
                            class_id,
                            embeddings,
                            logits,
                        })
                        .collect();
                    let loss = batch_loss(&items, &loss_cfg)?;
                    Ok((loss.total, cache, loss))
                };
            let (_, cache, loss) = run(&model)?;
            model.backward(&cache, &loss.grad_embeddings, &loss.grad_logits)?;
            Ok(module_instance(model, vec![], vec![], move |m, _| Ok(run(m)?.0)))
        }),
    ]
}
