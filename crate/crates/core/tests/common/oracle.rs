//! Plain nested-loop references for the fast kernels and metrics. Each check
//! panics on the first mismatch. Integer-valued inputs make the
//! integer-structured ops exact.

use std::collections::BTreeSet;

use mfaf_core::backbone::View;
use mfaf_core::heads::Descriptor;
use mfaf_core::loss::{mine_triplets, Mining, Triplet};
use mfaf_core::mfaf::{high_freq_branch, kernel_tensor, low_freq_branch, MfbParams, POOL_SIZES, SOBEL_KERNELS};
use mfaf_core::retrieval::{average_precision, rank_all, recall_at_k, sdm_at_k, RankedResult};
use mfaf_core::tensor::{avgpool_same, channel_pool, conv2d_fixed, ChannelPoolMode, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOAT_TOL: f64 = 1e-10;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0AC1E + tag)
}

struct Map {
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + ch]
    }

    fn tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.h, self.w, self.c], self.v.clone()).unwrap()
    }
}

fn random_map(r: &mut ChaCha8Rng, integer: bool) -> Map {
    let (h, w, c) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..6));
    let v = (0..h * w * c)
        .map(|_| {
            if integer {
                r.gen_range(-9..=9) as f64
            } else {
                r.gen_range(-2.0..2.0)
            }
        })
        .collect();
    Map { h, w, c, v }
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let err = (g - w).abs() / w.abs().max(1.0);
        assert!(err <= tol, "{what}[{i}]: got {g}, want {w}");
    }
}

fn naive_avgpool(m: &Map, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = Vec::new();
    for y in 0..m.h as isize {
        for x in 0..m.w as isize {
            for ch in 0..m.c {
                let (mut sum, mut n) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0 && sx >= 0 && sy < m.h as isize && sx < m.w as isize {
                            sum += m.at(sy as usize, sx as usize, ch);
                            n += 1.0;
                        }
                    }
                }
                out.push(sum / n);
            }
        }
    }
    out
}

/// Correlation through an explicitly padded copy of the map.
fn naive_conv(m: &Map, k: &[[f64; 3]; 3], replicate: bool) -> Vec<f64> {
    let (ph, pw) = (m.h + 2, m.w + 2);
    let mut padded = vec![0.0; ph * pw * m.c];
    for py in 0..ph {
        for px in 0..pw {
            let inside = (1..=m.h).contains(&py) && (1..=m.w).contains(&px);
            if !inside && !replicate {
                continue;
            }
            let sy = py.clamp(1, m.h) - 1;
            let sx = px.clamp(1, m.w) - 1;
            for ch in 0..m.c {
                padded[(py * pw + px) * m.c + ch] = m.at(sy, sx, ch);
            }
        }
    }
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            for ch in 0..m.c {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, kv) in row.iter().enumerate() {
                        acc += kv * padded[((y + dy) * pw + x + dx) * m.c + ch];
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn avgpool_same_matches_nested_loops(instances: usize) {
    let mut r = rng(1);
    for _ in 0..instances {
        let m = random_map(&mut r, false);
        for k in [1, 3, 5, 7] {
            let got = avgpool_same(&m.tensor(), k).unwrap();
            assert_close(got.data(), &naive_avgpool(&m, k), FLOAT_TOL, "avgpool_same");
        }
    }
}

pub fn conv2d_fixed_matches_nested_loops_for_all_kernels(instances: usize) {
    let mut r = rng(2);
    for _ in 0..instances {
        let m = random_map(&mut r, true);
        for k in &SOBEL_KERNELS {
            for (padding, replicate) in [(Padding::Zero, false), (Padding::Replicate, true)] {
                let want = naive_conv(&m, k, replicate);
                let grouped = conv2d_fixed(&m.tensor(), &kernel_tensor(k), true, padding).unwrap();
                assert_eq!(grouped.data(), &want[..], "grouped conv");
                let summed = conv2d_fixed(&m.tensor(), &kernel_tensor(k), false, padding).unwrap();
                let want_sum: Vec<f64> = want.chunks(m.c).map(|px| px.iter().sum()).collect();
                assert_eq!(summed.data(), &want_sum[..], "summed conv");
            }
        }
    }
}

pub fn channel_pool_matches_nested_loops(instances: usize) {
    let mut r = rng(3);
    for _ in 0..instances {
        let m = random_map(&mut r, true);
        let t = m.tensor();
        let mut mean = Vec::new();
        let mut max = Vec::new();
        for px in m.v.chunks(m.c) {
            mean.push(px.iter().sum::<f64>() / m.c as f64);
            max.push(px.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
        }
        assert_close(
            channel_pool(&t, ChannelPoolMode::Mean).unwrap().data(),
            &mean,
            FLOAT_TOL,
            "mean",
        );
        assert_eq!(channel_pool(&t, ChannelPoolMode::Max).unwrap().data(), &max[..]);
        let both: Vec<f64> = mean.iter().zip(&max).flat_map(|(&a, &b)| [a, b]).collect();
        assert_close(
            channel_pool(&t, ChannelPoolMode::Both).unwrap().data(),
            &both,
            FLOAT_TOL,
            "both",
        );
        let bins = r.gen_range(1..=m.c + 1);
        let mut adaptive = Vec::new();
        for px in m.v.chunks(m.c) {
            for i in 0..bins {
                let start = (i as f64 * m.c as f64 / bins as f64).floor() as usize;
                let end = ((i + 1) as f64 * m.c as f64 / bins as f64).ceil() as usize;
                adaptive.push(px[start..end].iter().sum::<f64>() / (end - start) as f64);
            }
        }
        let got = channel_pool(&t, ChannelPoolMode::AdaptiveMean(bins)).unwrap();
        assert_close(got.data(), &adaptive, FLOAT_TOL, "adaptive");
    }
}

fn random_params(r: &mut ChaCha8Rng, c: usize) -> MfbParams<f64> {
    let mut p = MfbParams::<f64>::new(c, 4, r).unwrap();
    for s in p.scale_weights.iter_mut() {
        s.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    }
    for b in [&mut p.edge_reduce_b, &mut p.edge_expand_b] {
        b.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    }
    p
}

pub fn low_freq_branch_matches_reference(instances: usize) {
    let mut r = rng(4);
    for _ in 0..instances {
        let m = random_map(&mut r, false);
        let p = random_params(&mut r, m.c);
        let pooled: Vec<Vec<f64>> = POOL_SIZES.iter().map(|&k| naive_avgpool(&m, k)).collect();
        let want: Vec<f64> = (0..m.v.len())
            .map(|i| {
                (0..3)
                    .map(|s| p.scale_weights[s].value.data()[i % m.c] * pooled[s][i])
                    .sum()
            })
            .collect();
        let got = low_freq_branch(&m.tensor(), &p).unwrap();
        assert_close(got.data(), &want, FLOAT_TOL, "low_freq_branch");
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn high_freq_branch_matches_reference(instances: usize) {
    let mut r = rng(5);
    for _ in 0..instances {
        let m = random_map(&mut r, false);
        let p = random_params(&mut r, m.c);
        let c = m.c;
        let wide = 4 * c;
        let edges: Vec<Vec<f64>> = SOBEL_KERNELS
            .iter()
            .map(|k| naive_conv(&m, k, true).into_iter().map(f64::abs).collect())
            .collect();
        let n = (m.h * m.w) as f64;
        let stats: Vec<f64> = (0..wide)
            .map(|j| edges[j / c].iter().skip(j % c).step_by(c).sum::<f64>() / n)
            .collect();
        let (rw, rb) = (p.edge_reduce_w.value.data(), p.edge_reduce_b.value.data());
        let narrow = rb.len();
        let hidden: Vec<f64> = (0..narrow)
            .map(|o| (rb[o] + (0..wide).map(|i| rw[o * wide + i] * stats[i]).sum::<f64>()).max(0.0))
            .collect();
        let (ew, eb) = (p.edge_expand_w.value.data(), p.edge_expand_b.value.data());
        let weights: Vec<f64> = (0..wide)
            .map(|o| sigmoid(eb[o] + (0..narrow).map(|i| ew[o * narrow + i] * hidden[i]).sum::<f64>()))
            .collect();
        let want: Vec<f64> = (0..m.v.len())
            .map(|idx| (0..4).map(|k| weights[k * c + idx % c] * edges[k][idx]).sum())
            .collect();
        let got = high_freq_branch(&m.tensor(), &p).unwrap();
        assert_close(got.data(), &want, FLOAT_TOL, "high_freq_branch");
    }
}

fn random_descriptors(r: &mut ChaCha8Rng, n: usize, d: usize, classes: u32, view: View) -> Vec<Descriptor> {
    (0..n)
        .map(|_| Descriptor {
            // Small integer entries make exact score ties common.
            values: (0..d).map(|_| r.gen_range(-2..=2) as f32).collect(),
            view,
            class_id: r.gen_range(0..classes),
            coords: Some((r.gen_range(0..4) as f64, r.gen_range(0..4) as f64)),
        })
        .collect()
}

fn naive_cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)) as f32
    }
}

/// 1-based rank of every gallery item by counting the items that beat it.
fn naive_ranks(q: &Descriptor, gallery: &[Descriptor]) -> Vec<usize> {
    let s: Vec<f32> = gallery.iter().map(|g| naive_cosine(&q.values, &g.values)).collect();
    (0..gallery.len())
        .map(|j| {
            1 + (0..gallery.len())
                .filter(|&i| s[i] > s[j] || (s[i] == s[j] && i < j))
                .count()
        })
        .collect()
}

struct Case {
    queries: Vec<Descriptor>,
    gallery: Vec<Descriptor>,
    results: Vec<RankedResult>,
}

fn retrieval_case(r: &mut ChaCha8Rng) -> Case {
    let classes = r.gen_range(2..6);
    let d = r.gen_range(2..5);
    let n = r.gen_range(3..15);
    let mut gallery = random_descriptors(r, n, d, classes, View::Satellite);
    let len = gallery.len();
    for c in 0..classes {
        gallery[c as usize % len].class_id = c;
    }
    let present: BTreeSet<u32> = gallery.iter().map(|g| g.class_id).collect();
    let n = r.gen_range(1..10);
    let queries: Vec<Descriptor> = random_descriptors(r, n, d, classes, View::Drone)
        .into_iter()
        .filter(|q| present.contains(&q.class_id))
        .collect();
    let results = if queries.is_empty() {
        Vec::new()
    } else {
        rank_all(&queries, &gallery).unwrap()
    };
    Case {
        queries,
        gallery,
        results,
    }
}

pub fn ranking_and_metrics_match_brute_force(instances: usize) {
    let mut r = rng(6);
    let mut checked = 0;
    while checked < instances {
        let case = retrieval_case(&mut r);
        if case.queries.is_empty() {
            continue;
        }
        checked += 1;
        let g = case.gallery.len();
        let mut ap_sum = 0.0;
        let mut hits = vec![0usize; g + 1];
        let mut sdm_sum = vec![0.0; g + 1];
        for (q, res) in case.queries.iter().zip(&case.results) {
            let ranks = naive_ranks(q, &case.gallery);
            let mut by_rank = vec![0; g];
            for (id, &rk) in ranks.iter().enumerate() {
                by_rank[rk - 1] = id;
            }
            assert_eq!(res.order, by_rank, "ranking");
            let rel: Vec<usize> = (0..g).filter(|&i| case.gallery[i].class_id == q.class_id).collect();
            let ap: f64 = rel
                .iter()
                .map(|&i| {
                    let better = rel.iter().filter(|&&j| ranks[j] <= ranks[i]).count();
                    better as f64 / ranks[i] as f64
                })
                .sum::<f64>()
                / rel.len() as f64;
            ap_sum += ap;
            let first_hit = rel.iter().map(|&i| ranks[i]).min().unwrap();
            for (k, h) in hits.iter_mut().enumerate().skip(1) {
                if first_hit <= k {
                    *h += 1;
                }
            }
            let qc = q.coords.unwrap();
            for (k, s) in sdm_sum.iter_mut().enumerate().skip(1) {
                let (mut num, mut den) = (0.0, 0.0);
                for (i, gd) in case.gallery.iter().enumerate() {
                    if ranks[i] <= k {
                        let gc = gd.coords.unwrap();
                        let dist = ((qc.0 - gc.0).powi(2) + (qc.1 - gc.1).powi(2)).sqrt();
                        let w = (k + 1 - ranks[i]) as f64;
                        num += w * (-dist).exp();
                        den += w;
                    }
                }
                *s += num / den;
            }
        }
        let nq = case.queries.len() as f64;
        assert!((average_precision(&case.results).unwrap() - ap_sum / nq).abs() <= FLOAT_TOL);
        for k in 1..=g {
            let rk = recall_at_k(&case.results, k).unwrap();
            assert_eq!(rk.value, hits[k] as f64 / nq, "R@{k}");
            let sdm = sdm_at_k(&case.results, k, 1.0).unwrap();
            assert!((sdm - sdm_sum[k] / nq).abs() <= FLOAT_TOL, "SDM@{k}");
        }
    }
}

fn random_labels(r: &mut ChaCha8Rng) -> Vec<(View, u32)> {
    let n = r.gen_range(2..12);
    let classes = r.gen_range(2..5);
    let mut labels: Vec<(View, u32)> = (0..n)
        .map(|_| {
            let v = if r.gen_bool(0.5) { View::Drone } else { View::Satellite };
            (v, r.gen_range(0..classes))
        })
        .collect();
    labels[0].1 = 0;
    labels[1].1 = 1;
    labels
}

pub fn batch_all_mining_matches_exhaustive_enumeration(instances: usize) {
    let mut r = rng(7);
    for _ in 0..instances {
        let labels = random_labels(&mut r);
        let n = labels.len();
        let mut want = Vec::new();
        for a in 0..n {
            for p in 0..n {
                for q in 0..n {
                    let (va, ca) = labels[a];
                    let pos = labels[p].0 != va && labels[p].1 == ca;
                    let neg = labels[q].0 != va && labels[q].1 != ca;
                    if pos && neg {
                        want.push((a, p, q));
                    }
                }
            }
        }
        let got = mine_triplets::<f64>(&labels, Mining::BatchAll, |_, _| 0.0);
        match got {
            Ok(t) => {
                let mut got: Vec<(usize, usize, usize)> = t
                    .iter()
                    .map(
                        |&Triplet {
                             anchor,
                             positive,
                             negative,
                         }| (anchor, positive, negative),
                    )
                    .collect();
                got.sort_unstable();
                assert_eq!(got, want);
            }
            Err(_) => assert!(want.is_empty(), "mining failed although {} triplets exist", want.len()),
        }
    }
}

pub fn batch_hard_mining_picks_extreme_pairs(instances: usize) {
    let mut r = rng(8);
    for _ in 0..instances {
        let labels = random_labels(&mut r);
        let n = labels.len();
        let d: Vec<f64> = (0..n * n).map(|_| r.gen_range(0.0..10.0)).collect();
        let Ok(got) = mine_triplets(&labels, Mining::BatchHard, |i, j| d[i * n + j]) else {
            continue;
        };
        for t in got {
            let (va, ca) = labels[t.anchor];
            for j in 0..n {
                if labels[j].0 == va {
                    continue;
                }
                if labels[j].1 == ca {
                    assert!(d[t.anchor * n + j] <= d[t.anchor * n + t.positive]);
                } else {
                    assert!(d[t.anchor * n + j] >= d[t.anchor * n + t.negative]);
                }
            }
        }
    }
}
