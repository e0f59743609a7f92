//! Cross-entropy and cross-domain triplet losses and the per-batch objective.
//!
//! The batch objective averages, over active branches, the sum of the branch's
//! mean cross-entropy (over every item of both views) and its mean triplet
//! loss over mined triplets. A triplet's positive and negative always come
//! from the view domain opposite to the anchor; anchors are taken from both
//! domains.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::View;
use crate::heads::Descriptor;
use crate::mfaf::Branch;
use crate::tensor::{log_softmax, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class {class} out of range for {classes} logits")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("mining: {0}")]
    Mining(String),
    #[error("batch items disagree on branches or lengths")]
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`; a zero vector has cosine 0 with everything.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Every valid cross-domain triplet in the batch.
    #[default]
    BatchAll,
    /// Per anchor, the farthest positive and the closest negative.
    BatchHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            distance: Distance::Euclidean,
            mining: Mining::BatchAll,
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn distance<T: Scalar>(a: &[T], b: &[T], kind: Distance) -> T {
    match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt(),
        Distance::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == T::zero() || nb == T::zero() {
                return T::one();
            }
            let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            T::one() - dot / (na * nb)
        }
    }
}

/// `(∂d/∂a, ∂d/∂b)`; zero where the distance is not differentiable.
fn distance_grad<T: Scalar>(a: &[T], b: &[T], kind: Distance) -> (Vec<T>, Vec<T>) {
    match kind {
        Distance::Euclidean => {
            let d = distance(a, b, kind);
            if d == T::zero() {
                return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
            }
            let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y) / d).collect();
            let gb = ga.iter().map(|&g| -g).collect();
            (ga, gb)
        }
        Distance::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == T::zero() || nb == T::zero() {
                return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
            }
            let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let cos = dot / (na * nb);
            let ga = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| -(y / (na * nb) - cos * x / (na * na)))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| -(x / (na * nb) - cos * y / (nb * nb)))
                .collect();
            (ga, gb)
        }
    }
}

/// `−log softmax(logits)[class]` and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, class: usize) -> Result<(T, Tensor<T>), LossError> {
    let n = logits.len();
    if class >= n {
        return Err(LossError::ClassOutOfRange { class, classes: n });
    }
    let lp = log_softmax(logits)?;
    let loss = -lp.data()[class];
    let grad = lp
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| l.exp() - if i == class { T::one() } else { T::zero() })
        .collect();
    Ok((loss, Tensor::vector(grad)))
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, class: usize) -> Result<T, LossError> {
    Ok(cross_entropy_with_grad(logits, class)?.0)
}

fn hinge<T: Scalar>(d_ap: T, d_an: T, margin: T) -> T {
    (d_ap - d_an + margin).max(T::zero())
}

/// Hinge value of raw vectors and its gradients with respect to anchor,
/// positive and negative. The gradient is zero when the hinge is inactive.
pub fn triplet_with_grad<T: Scalar>(a: &[T], p: &[T], n: &[T], distance_kind: Distance, margin: T) -> (T, [Vec<T>; 3]) {
    let l = hinge(distance(a, p, distance_kind), distance(a, n, distance_kind), margin);
    if l <= T::zero() {
        let z = vec![T::zero(); a.len()];
        return (l, [z.clone(), z.clone(), z]);
    }
    let (gap, gp) = distance_grad(a, p, distance_kind);
    let (gan, gn) = distance_grad(a, n, distance_kind);
    let ga = gap.iter().zip(&gan).map(|(&x, &y)| x - y).collect();
    let gn = gn.into_iter().map(|g| -g).collect();
    (l, [ga, gp, gn])
}

/// `max(0, d(a, p) − d(a, n) + M)` with `p`, `n` drawn from the domain opposite to `a`.
pub fn cd_triplet<T: Scalar>(
    anchor: &Descriptor<T>,
    positive: &Descriptor<T>,
    negative: &Descriptor<T>,
    cfg: &TripletConfig,
) -> Result<T, LossError> {
    if positive.view == anchor.view || negative.view == anchor.view {
        return Err(LossError::Mining(format!(
            "positive and negative must come from the {} domain",
            anchor.view.other().as_str()
        )));
    }
    if positive.class_id != anchor.class_id {
        return Err(LossError::Mining("positive has a different class".into()));
    }
    if negative.class_id == anchor.class_id {
        return Err(LossError::Mining("negative shares the anchor class".into()));
    }
    if positive.values.len() != anchor.values.len() || negative.values.len() != anchor.values.len() {
        return Err(LossError::Inconsistent);
    }
    Ok(hinge(
        distance(&anchor.values, &positive.values, cfg.distance),
        distance(&anchor.values, &negative.values, cfg.distance),
        T::lit(cfg.margin),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mines cross-domain triplets from `(view, class)` labels. Batch-hard mining
/// needs the distance of every pair, supplied by `dist`.
pub fn mine_triplets<T: Scalar>(
    labels: &[(View, u32)],
    mining: Mining,
    dist: impl Fn(usize, usize) -> T,
) -> Result<Vec<Triplet>, LossError> {
    let mut classes: Vec<u32> = labels.iter().map(|l| l.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(LossError::Mining(format!(
            "batch has {} class(es); need at least two for negatives",
            classes.len()
        )));
    }
    let mut out = Vec::new();
    for (a, &(va, ca)) in labels.iter().enumerate() {
        let other = |i: usize| labels[i].0 != va;
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| other(i) && labels[i].1 == ca).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| other(i) && labels[i].1 != ca).collect();
        match mining {
            Mining::BatchAll => {
                for &p in &pos {
                    for &n in &neg {
                        out.push(Triplet {
                            anchor: a,
                            positive: p,
                            negative: n,
                        });
                    }
                }
            }
            Mining::BatchHard => {
                if pos.is_empty() || neg.is_empty() {
                    continue;
                }
                let mut hp = pos[0];
                for &p in &pos[1..] {
                    if dist(a, p) > dist(a, hp) {
                        hp = p;
                    }
                }
                let mut hn = neg[0];
                for &n in &neg[1..] {
                    if dist(a, n) < dist(a, hn) {
                        hn = n;
                    }
                }
                out.push(Triplet {
                    anchor: a,
                    positive: hp,
                    negative: hn,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(LossError::Mining("no valid cross-domain triplet in batch".into()));
    }
    Ok(out)
}

/// One image's per-branch outputs as seen by the loss.
#[derive(Debug, Clone)]
pub struct LossItem<T> {
    pub view: View,
    pub class_id: u32,
    pub embeddings: BTreeMap<Branch, Tensor<T>>,
    pub logits: BTreeMap<Branch, Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct BranchTerms<T> {
    pub cross_entropy: T,
    pub triplet: T,
    pub triplets: usize,
    /// Triplets with a strictly positive hinge.
    pub active: usize,
}

#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub total: T,
    pub terms: BTreeMap<Branch, BranchTerms<T>>,
    pub grad_embeddings: Vec<BTreeMap<Branch, Tensor<T>>>,
    pub grad_logits: Vec<BTreeMap<Branch, Tensor<T>>>,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn mean_cross_entropy(&self) -> T {
        self.terms.values().map(|t| t.cross_entropy).sum::<T>() / T::lit(self.terms.len() as f64)
    }

    pub fn mean_triplet(&self) -> T {
        self.terms.values().map(|t| t.triplet).sum::<T>() / T::lit(self.terms.len() as f64)
    }
}

/// `L = (1/B) Σ_b (L_CE^b + L_triplet^b)` over the `B` active branches, with gradients.
pub fn batch_loss<T: Scalar>(items: &[LossItem<T>], cfg: &TripletConfig) -> Result<BatchLoss<T>, LossError> {
    let first = items.first().ok_or(LossError::Mining("empty batch".into()))?;
    let branches: Vec<Branch> = first.embeddings.keys().copied().collect();
    if branches.is_empty()
        || items
            .iter()
            .any(|it| !it.embeddings.keys().eq(branches.iter()) || !it.logits.keys().eq(branches.iter()))
    {
        return Err(LossError::Inconsistent);
    }
    let labels: Vec<(View, u32)> = items.iter().map(|it| (it.view, it.class_id)).collect();
    let n_items = T::lit(items.len() as f64);
    let branch_scale = T::one() / T::lit(branches.len() as f64);
    let margin = T::lit(cfg.margin);

    let mut grad_embeddings: Vec<BTreeMap<Branch, Tensor<T>>> = vec![BTreeMap::new(); items.len()];
    let mut grad_logits: Vec<BTreeMap<Branch, Tensor<T>>> = vec![BTreeMap::new(); items.len()];
    let mut terms = BTreeMap::new();
    let mut total = T::zero();

    for &b in &branches {
        let mut ce = T::zero();
        for (i, it) in items.iter().enumerate() {
            let (l, g) = cross_entropy_with_grad(&it.logits[&b], it.class_id as usize)?;
            ce = ce + l;
            grad_logits[i].insert(b, g.scaled(branch_scale / n_items));
        }
        ce = ce / n_items;

        let emb: Vec<&[T]> = items.iter().map(|it| it.embeddings[&b].data()).collect();
        let dim = emb[0].len();
        if emb.iter().any(|e| e.len() != dim) {
            return Err(LossError::Inconsistent);
        }
        let triplets = mine_triplets(&labels, cfg.mining, |i, j| distance(emb[i], emb[j], cfg.distance))?;
        let count = T::lit(triplets.len() as f64);
        let mut grads = vec![vec![T::zero(); dim]; items.len()];
        let mut trip = T::zero();
        let mut active = 0;
        for t in &triplets {
            let (a, p, n) = (emb[t.anchor], emb[t.positive], emb[t.negative]);
            let (l, [ga, gp, gn]) = triplet_with_grad(a, p, n, cfg.distance, margin);
            trip = trip + l;
            if l > T::zero() {
                active += 1;
                let w = branch_scale / count;
                for k in 0..dim {
                    grads[t.anchor][k] = grads[t.anchor][k] + w * ga[k];
                    grads[t.positive][k] = grads[t.positive][k] + w * gp[k];
                    grads[t.negative][k] = grads[t.negative][k] + w * gn[k];
                }
            }
        }
        trip = trip / count;
        for (i, g) in grads.into_iter().enumerate() {
            grad_embeddings[i].insert(b, Tensor::vector(g));
        }
        total = total + ce + trip;
        terms.insert(
            b,
            BranchTerms {
                cross_entropy: ce,
                triplet: trip,
                triplets: triplets.len(),
                active,
            },
        );
    }

    Ok(BatchLoss {
        total: total * branch_scale,
        terms,
        grad_embeddings,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(values: Vec<f64>, view: View, class_id: u32) -> Descriptor<f64> {
        Descriptor {
            values,
            view,
            class_id,
            coords: None,
        }
    }

    #[test]
    fn cross_entropy_values() {
        let u = Tensor::vector(vec![0.7f64; 4]);
        assert!((cross_entropy(&u, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let s = Tensor::vector(vec![1000.0f64, 0.0, 0.0, 0.0]);
        assert!(cross_entropy(&s, 0).unwrap() <= 1e-6);
        assert!(matches!(
            cross_entropy(&u, 4),
            Err(LossError::ClassOutOfRange { class: 4, classes: 4 })
        ));
    }

    #[test]
    fn triplet_hand_values() {
        let cfg = TripletConfig::default();
        let a = desc(vec![0.0, 0.0], View::Drone, 1);
        let p = desc(vec![1.0, 0.0], View::Satellite, 1);
        let far = desc(vec![3.0, 0.0], View::Satellite, 2);
        let near = desc(vec![1.2, 0.0], View::Satellite, 2);
        assert_eq!(cd_triplet(&a, &p, &far, &cfg).unwrap(), 0.0);
        assert!((cd_triplet(&a, &p, &near, &cfg).unwrap() - 0.1).abs() < 1e-12);
        let same = desc(vec![1.0, 0.0], View::Satellite, 2);
        assert!((cd_triplet(&a, &p, &same, &cfg).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_rejects_same_domain() {
        let cfg = TripletConfig::default();
        let a = desc(vec![0.0], View::Drone, 1);
        let p = desc(vec![1.0], View::Drone, 1);
        let n = desc(vec![2.0], View::Satellite, 2);
        assert!(matches!(cd_triplet(&a, &p, &n, &cfg), Err(LossError::Mining(_))));
    }

    #[test]
    fn mining_needs_two_classes() {
        let labels = [(View::Drone, 0), (View::Satellite, 0)];
        assert!(matches!(
            mine_triplets::<f64>(&labels, Mining::BatchAll, |_, _| 0.0),
            Err(LossError::Mining(_))
        ));
    }

    #[test]
    fn batch_all_counts_symmetric_triplets() {
        // Two classes, each with one satellite and two drones.
        let labels = [
            (View::Satellite, 0),
            (View::Drone, 0),
            (View::Drone, 0),
            (View::Satellite, 1),
            (View::Drone, 1),
            (View::Drone, 1),
        ];
        let t = mine_triplets::<f64>(&labels, Mining::BatchAll, |_, _| 0.0).unwrap();
        // Drone anchors: 4 × (1 pos × 1 neg); satellite anchors: 2 × (2 pos × 2 neg).
        assert_eq!(t.len(), 4 + 8);
    }
}
