//! Batch sampling, SGD with momentum, and the epoch loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::View;
use crate::config::{AugmentConfig, OptimConfig, RunConfig, SamplerConfig};
use crate::data::{derive_seed, pad_shift_tensor, Dataset, PadMode, PadSpec, Split};
use crate::error::{Error, Result};
use crate::heads::Mode;
use crate::init::Parametrized;
use crate::loss::{batch_loss, BatchLoss, LossItem, TripletConfig};
use crate::model::{Model, ModelCache};
use crate::tensor::Tensor;

/// Seed stream reserved for the sampler of each epoch.
const SAMPLER_STREAM: u64 = 0x5A4D_0000;
/// Seed stream for training-time shifts; mixed with epoch and step.
const AUGMENT_STREAM: u64 = 0xA06D_0000_0000;

/// Per-class image indices of the training split.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    pub classes: Vec<u32>,
    pub satellite: BTreeMap<u32, usize>,
    pub drones: BTreeMap<u32, Vec<usize>>,
}

impl ClassIndex {
    pub fn train(ds: &Dataset) -> Self {
        let mut satellite = BTreeMap::new();
        let mut drones: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for r in ds.manifest.images.iter().filter(|r| r.split == Split::Train) {
            match r.view {
                View::Satellite => {
                    satellite.insert(r.class_id, r.id);
                }
                View::Drone => drones.entry(r.class_id).or_default().push(r.id),
            }
        }
        let classes = satellite.keys().copied().filter(|c| drones.contains_key(c)).collect();
        Self {
            classes,
            satellite,
            drones,
        }
    }
}

/// The batches of one epoch. Drone images of every class are shuffled and cut
/// into groups of Q; round `r` pairs each class's `r`-th group with its
/// satellite image, and the classes of a round are shuffled and cut into
/// batches of P. A trailing single-class batch joins the batch before it.
/// Every drone image is therefore seen once per epoch.
pub fn epoch_batches(index: &ClassIndex, cfg: &SamplerConfig, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLER_STREAM + epoch as u64));
    let q = cfg.drones_per_class.max(1);
    let mut groups: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
    for &c in &index.classes {
        let mut d = index.drones[&c].clone();
        d.shuffle(&mut rng);
        groups.insert(c, d.chunks(q).map(|g| g.to_vec()).collect());
    }
    let rounds = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut classes: Vec<u32> = index.classes.iter().copied().filter(|c| groups[c].len() > r).collect();
        classes.shuffle(&mut rng);
        let mut round: Vec<Vec<u32>> = classes
            .chunks(cfg.classes_per_batch.max(2))
            .map(|c| c.to_vec())
            .collect();
        if round.len() > 1 && round.last().is_some_and(|b| b.len() < 2) {
            let tail = round.pop().expect("non-empty");
            round.last_mut().expect("len > 1").extend(tail);
        }
        for chunk in round.into_iter().filter(|b| b.len() >= 2) {
            let mut items = Vec::new();
            for c in chunk {
                items.push(index.satellite[&c]);
                items.extend(&groups[&c][r]);
            }
            batches.push(items);
        }
    }
    batches
}

/// SGD with momentum, L2 weight decay and optional gradient-norm clipping:
/// `v ← μ v + (s g + λ w)`, `w ← w − lr v`, with `s = min(1, max_norm / ‖g‖)`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub max_grad_norm: f32,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(model: &Model<f32>, cfg: &OptimConfig) -> Self {
        Self {
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
            max_grad_norm: cfg.max_grad_norm as f32,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Global L2 norm of all parameter gradients.
    pub fn grad_norm(model: &Model<f32>) -> f32 {
        model
            .params()
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Updates the weights and returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut Model<f32>, lr: f32) -> f32 {
        let norm = Self::grad_norm(model);
        let scale = if self.max_grad_norm > 0.0 && norm > self.max_grad_norm {
            self.max_grad_norm / norm
        } else {
            1.0
        };
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.data_mut()) {
                *v = self.momentum * *v + scale * g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
    pub triplets: usize,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
    pub batches: usize,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,cross_entropy,triplet,batches";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{}",
            self.epoch + 1,
            self.lr,
            self.loss,
            self.cross_entropy,
            self.triplet,
            self.batches
        )
    }
}

/// Training pixels of a batch. Drone images are shifted with black or flip
/// padding with probability `shift_prob`; satellite images are left alone.
pub fn augmented_pixels(
    ds: &Dataset,
    batch: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, AUGMENT_STREAM + ((epoch as u64) << 16) + step as u64));
    batch
        .iter()
        .map(|&i| {
            let img = &ds.images[i];
            if cfg.shift_prob <= 0.0 || img.view != View::Drone || !rng.gen_bool(cfg.shift_prob) {
                return Ok(img.pixels.clone());
            }
            let mode = if rng.gen_bool(0.5) {
                PadMode::Black
            } else {
                PadMode::Flip
            };
            let px = rng.gen_range(1..=cfg.max_shift_px);
            Ok(pad_shift_tensor(&img.pixels, PadSpec { mode, px })?)
        })
        .collect()
}

/// Forward pass of a batch through the model and the loss.
pub fn forward_batch(
    model: &Model<f32>,
    ds: &Dataset,
    batch: &[usize],
    pixels: &[Tensor<f32>],
    loss: &TripletConfig,
) -> Result<(BatchLoss<f32>, ModelCache<f32>)> {
    let pixels: Vec<&Tensor<f32>> = pixels.iter().collect();
    let (out, cache) = model.forward(&pixels, Mode::Train)?;
    let items: Vec<LossItem<f32>> = batch
        .iter()
        .zip(out.embeddings.into_iter().zip(out.logits))
        .map(|(&i, (embeddings, logits))| LossItem {
            view: ds.images[i].view,
            class_id: ds.images[i].class_id,
            embeddings,
            logits,
        })
        .collect();
    Ok((batch_loss(&items, loss)?, cache))
}

/// Model, optimiser state and the number of finished epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub sgd: Sgd,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model_config(), config.seed)?;
        let sgd = Sgd::new(&model, &config.optim);
        Ok(Self {
            config,
            model,
            sgd,
            epoch: 0,
        })
    }

    /// Rejects datasets whose images or class count do not fit the model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let m = &ds.manifest.config;
        if m.image_size != self.config.backbone.image_size {
            return Err(Error::Config(format!(
                "dataset images are {0}x{0}, model expects {1}x{1}",
                m.image_size, self.config.backbone.image_size
            )));
        }
        if ds.num_train_classes() != self.config.mcb.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} training classes, classifier has {}",
                ds.num_train_classes(),
                self.config.mcb.num_classes
            )));
        }
        if let Some(bad) = ds
            .manifest
            .train_classes
            .iter()
            .find(|&&c| c as usize >= self.config.mcb.num_classes)
        {
            return Err(Error::Config(format!(
                "training class id {bad} exceeds the classifier range"
            )));
        }
        Ok(())
    }

    /// One optimisation step on the given image indices; `step` numbers the
    /// batch within the current epoch.
    pub fn step(&mut self, ds: &Dataset, batch: &[usize], step: usize, lr: f64) -> Result<StepStats> {
        self.model.zero_grads();
        let c = &self.config;
        let pixels = augmented_pixels(ds, batch, &c.augment, c.seed, self.epoch, step)?;
        let (loss, cache) = forward_batch(&self.model, ds, batch, &pixels, &self.config.loss)?;
        self.model.backward(&cache, &loss.grad_embeddings, &loss.grad_logits)?;
        let grad_norm = self.sgd.step(&mut self.model, lr as f32) as f64;
        self.model.update_running_stats(&cache);
        Ok(StepStats {
            loss: loss.total as f64,
            grad_norm,
            cross_entropy: loss.mean_cross_entropy() as f64,
            triplet: loss.mean_triplet() as f64,
            triplets: loss.terms.values().map(|t| t.triplets).sum(),
            active: loss.terms.values().map(|t| t.active).sum(),
        })
    }

    /// Runs the next epoch and returns its mean losses.
    pub fn train_epoch(&mut self, ds: &Dataset, index: &ClassIndex) -> Result<EpochStats> {
        let epoch = self.epoch;
        let lr = self.config.optim.lr_at(epoch);
        let batches = epoch_batches(index, &self.config.sampler, self.config.seed, epoch);
        let (mut loss, mut ce, mut trip) = (0.0, 0.0, 0.0);
        for (step, b) in batches.iter().enumerate() {
            let s = self.step(ds, b, step, lr)?;
            if !s.loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss += s.loss;
            ce += s.cross_entropy;
            trip += s.triplet;
        }
        let n = batches.len().max(1) as f64;
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            loss: loss / n,
            cross_entropy: ce / n,
            triplet: trip / n,
            batches: batches.len(),
        })
    }

    /// Trains until `optim.epochs`, calling `on_epoch` after each epoch.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        mut on_epoch: impl FnMut(&EpochStats, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        self.check_dataset(ds)?;
        let index = ClassIndex::train(ds);
        let mut out = Vec::new();
        while self.epoch < self.config.optim.epochs {
            let s = self.train_epoch(ds, &index)?;
            log::info!(
                "epoch {} lr {:.2e} loss {:.4} (ce {:.4}, triplet {:.4})",
                s.epoch + 1,
                s.lr,
                s.loss,
                s.cross_entropy,
                s.triplet
            );
            on_epoch(&s, self)?;
            out.push(s);
        }
        Ok(out)
    }
}
