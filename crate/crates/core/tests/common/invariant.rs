//! Structural properties checked on seeded random cases. Each check panics on
//! the first violation.

use std::collections::BTreeSet;

use mfaf_core::backbone::View;
use mfaf_core::data::{pad_shift_tensor, PadMode, PadSpec};
use mfaf_core::heads::Descriptor;
use mfaf_core::mfaf::{fsa_forward, high_freq_branch, FsaParams, MfbParams, Pooling};
use mfaf_core::retrieval::{query_average_precision, query_sdm, rank_all, recall_at_k, RankedResult};
use mfaf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x1A7 + tag)
}

fn random_map(r: &mut ChaCha8Rng, c: usize) -> Tensor<f64> {
    let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
    let v = (0..h * w * c).map(|_| r.gen_range(-3.0..3.0)).collect();
    Tensor::new(vec![h, w, c], v).unwrap()
}

pub fn constant_input_gives_zero_high_frequency(cases: usize) {
    let mut r = rng(1);
    for _ in 0..cases {
        let (h, w, c) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..5));
        let p = MfbParams::<f64>::new(c, 4, &mut r).unwrap();
        let v: f64 = r.gen_range(-5.0..5.0);
        let out = high_freq_branch(&Tensor::full(&[h, w, c], v.round()), &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0), "integer constant {}", v.round());
        let out = high_freq_branch(&Tensor::full(&[h, w, c], v), &p).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() <= 1e-12 * v.abs()), "constant {v}");
    }
}

pub fn attention_strictly_inside_unit_interval(cases: usize) {
    let mut r = rng(2);
    for i in 0..cases {
        let pooling = [Pooling::Zpool, Pooling::Aap, Pooling::Ap, Pooling::Mp][i % 4];
        let c = 4 * r.gen_range(1..5);
        let p = FsaParams::<f64>::new("fsa", c, 4, pooling, &mut r).unwrap();
        let (_, cache) = fsa_forward(&random_map(&mut r, c), &p).unwrap();
        assert!(cache.attention().data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

pub fn recall_monotone_in_k(cases: usize) {
    let mut r = rng(3);
    let mut done = 0;
    while done < cases {
        let mut desc = |view| Descriptor {
            values: (0..3).map(|_| r.gen_range(-2..=2) as f32).collect(),
            view,
            class_id: r.gen_range(0..3),
            coords: None,
        };
        let gallery: Vec<Descriptor> = (0..8).map(|_| desc(View::Satellite)).collect();
        let queries: Vec<Descriptor> = (0..5)
            .map(|_| desc(View::Drone))
            .filter(|q| gallery.iter().any(|g| g.class_id == q.class_id))
            .collect();
        if queries.is_empty() {
            continue;
        }
        done += 1;
        let results = rank_all(&queries, &gallery).unwrap();
        let mut prev = 0.0;
        for k in 1..=gallery.len() {
            let v = recall_at_k(&results, k).unwrap().value;
            assert!(v >= prev, "R@{k} = {v} < {prev}");
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }
}

fn single_relevant(n: usize, rank: usize) -> RankedResult {
    RankedResult {
        query_id: 0,
        order: (0..n).collect(),
        scores: (0..n).map(|i| 1.0 - i as f32 / n as f32).collect(),
        matches: BTreeSet::from([rank - 1]),
        query_coords: Some((0.0, 0.0)),
        gallery_coords: vec![Some((1.0, 0.0)); n],
    }
}

pub fn single_relevant_ap_is_reciprocal_rank(cases: usize) {
    let mut r = rng(4);
    for _ in 0..cases {
        let n = r.gen_range(1..50);
        let rank = r.gen_range(1..=n);
        let ap = query_average_precision(&single_relevant(n, rank)).unwrap();
        assert!((ap - 1.0 / rank as f64).abs() < 1e-15);
    }
}

pub fn sdm_one_iff_top_k_distances_zero(cases: usize) {
    let mut r = rng(5);
    for _ in 0..cases {
        let n = r.gen_range(1..12);
        let k = r.gen_range(1..12);
        let mut res = single_relevant(n, 1);
        let zero: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        for (c, &z) in res.gallery_coords.iter_mut().zip(&zero) {
            *c = Some(if z { (0.0, 0.0) } else { (r.gen_range(0.01..3.0), 0.0) });
        }
        let sdm = query_sdm(&res, k, 1.0).unwrap();
        assert_eq!(sdm == 1.0, zero[..k.min(n)].iter().all(|&z| z));
    }
}

pub fn black_padding_composes(cases: usize) {
    let mut r = rng(6);
    let mut done = 0;
    while done < cases {
        let x = random_map(&mut r, 3);
        let w = x.shape()[1];
        let (a, b) = (r.gen_range(0..w), r.gen_range(0..w));
        if a + b >= w {
            continue;
        }
        done += 1;
        let black = |px| PadSpec {
            mode: PadMode::Black,
            px,
        };
        let twice = pad_shift_tensor(&pad_shift_tensor(&x, black(a)).unwrap(), black(b)).unwrap();
        assert_eq!(twice, pad_shift_tensor(&x, black(a + b)).unwrap());
    }
}

pub fn zero_padding_is_identity(cases: usize) {
    let mut r = rng(7);
    for _ in 0..cases {
        let x = random_map(&mut r, 3);
        for mode in [PadMode::Black, PadMode::Flip] {
            assert_eq!(pad_shift_tensor(&x, PadSpec { mode, px: 0 }).unwrap(), x);
        }
    }
}
