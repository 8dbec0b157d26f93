use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlaq_core::aggregation::{
    aggregate_boq, aggregate_vlaq, assign_sinkhorn, assign_softmax, head_forward, similarity_scores, HeadOptions,
};
use vlaq_core::fusion::{fuse_tokens, FusionWeights, Source};
use vlaq_core::io::batch::PlaceBalancedSampler;
use vlaq_core::io::tokens::{decode_tokens, encode_tokens};
use vlaq_core::loss::{mine_pairs, ms_loss, MsParams};
use vlaq_core::retrieval::DescriptorIndex;
use vlaq_core::tensor::{l2_normalize, matmul, matmul_nt, norm, normalize_rows, softmax_columns, Matrix, NORM_EPS};

fn random(rows: usize, cols: usize, scale: f32, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut m = random(rows, cols, 1.0, seed);
    normalize_rows(&mut m);
    m
}

fn matrix(max_rows: usize, max_cols: usize, scale: f32) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-scale..scale, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_columns_sum_to_one(m in matrix(12, 6, 1e4)) {
        let a = softmax_columns(&m).unwrap();
        for s in a.column_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-6, "column sum {s}");
        }
        prop_assert!(a.data().iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant(
        v in prop::collection::vec(-10.0f32..10.0, 1..40),
        c in 0.01f32..100.0,
    ) {
        prop_assume!(norm(&v) > 1e-3);
        let once = l2_normalize(&v, NORM_EPS).unwrap();
        let twice = l2_normalize(&once, NORM_EPS).unwrap();
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        let from_scaled = l2_normalize(&scaled, NORM_EPS).unwrap();
        prop_assert!((norm(&once) - 1.0).abs() < 1e-6);
        for ((a, b), s) in once.iter().zip(&twice).zip(&from_scaled) {
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((a - s).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative(n in 1usize..6, k in 1usize..6, l in 1usize..6, p in 1usize..6, seed in any::<u64>()) {
        let a = random(n, k, 1.0, seed);
        let b = random(k, l, 1.0, seed ^ 1);
        let c = random(l, p, 1.0, seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-4);
    }

    #[test]
    fn vlaq_is_boq_minus_queries(m in 1usize..10, d in 1usize..8, s in 1usize..6, seed in any::<u64>()) {
        let tokens = unit_rows(m, d, seed);
        let queries = random(s, d, 1.0, seed ^ 7);
        let alpha = assign_softmax(&similarity_scores(&tokens, &queries).unwrap()).unwrap().alpha;
        let v = aggregate_vlaq(&tokens, &queries, &alpha).unwrap();
        let b = aggregate_boq(&tokens, &alpha).unwrap();
        prop_assert!(v.max_abs_diff(&b.sub(&queries).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn descriptor_ignores_token_order(m in 2usize..10, d in 1usize..6, s in 1usize..5, seed in any::<u64>()) {
        let tokens = unit_rows(m, d, seed);
        let q0 = random(s, d, 1.0, seed ^ 3);
        let q1 = random(s, d, 1.0, seed ^ 4);
        let opts = HeadOptions::default();
        let (base, _) = head_forward(&tokens, &[&q0, &q1], None, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let permuted = Matrix::from_fn(m, d, |i, j| tokens.get(order[i], j));
        let (g, _) = head_forward(&permuted, &[&q0, &q1], None, &opts).unwrap();
        for (a, b) in base.values.iter().zip(&g.values) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn sinkhorn_marginals_are_uniform(m in 2usize..8, s in 2usize..6, seed in any::<u64>()) {
        let scores = random(m, s, 1.0, seed);
        let a = assign_sinkhorn(&scores, 100, 1e-9).unwrap();
        prop_assert!(a.converged);
        for r in a.alpha.row_sums() {
            prop_assert!((r - 1.0 / m as f64).abs() <= 1e-6);
        }
        for c in a.alpha.column_sums() {
            prop_assert!((c - 1.0 / s as f64).abs() <= 1e-6);
        }
    }

    #[test]
    fn sinkhorn_reports_its_marginal_error(m in 2usize..8, s in 2usize..6, seed in any::<u64>(), iters in 1usize..20) {
        let scores = random(m, s, 6.0, seed);
        let a = assign_sinkhorn(&scores, iters, 1e-9).unwrap();
        let err = a
            .alpha
            .row_sums()
            .iter()
            .map(|r| (r - 1.0 / m as f64).abs())
            .chain(a.alpha.column_sums().iter().map(|c| (c - 1.0 / s as f64).abs()))
            .fold(0.0, f64::max);
        prop_assert!((err - a.marginal_error).abs() <= 1e-6);
        prop_assert_eq!(a.converged, a.marginal_error <= 1e-9);
        prop_assert!(a.iterations <= iters);
    }

    #[test]
    fn residual_fusion_anchors(m in 1usize..8, d in 1usize..8, seed in any::<u64>()) {
        let dino = unit_rows(m, d, seed);
        let clip = unit_rows(m, d, seed ^ 9);
        let zeros = vec![0.0f32; d];
        let z = fuse_tokens(&dino, &clip, &FusionWeights::Residual { w: &Matrix::zeros(d, d), b: &zeros }).unwrap();
        prop_assert_eq!(&z, &dino);
        let z = fuse_tokens(&dino, &clip, &FusionWeights::Residual { w: &Matrix::identity(d), b: &zeros }).unwrap();
        prop_assert!(z.max_abs_diff(&clip).unwrap() <= 1e-6);
    }

    #[test]
    fn mining_matches_brute_force(places in 2usize..5, per in 1usize..4, d in 2usize..6, eps in 0.0f64..0.5, seed in any::<u64>()) {
        let n = places * per;
        let g = unit_rows(n, d, seed).cast::<f64>();
        let sim = matmul_nt(&g, &g).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % places).collect();
        let mined = mine_pairs(&sim, &labels, eps).unwrap();
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
            let (mut want_p, mut want_n) = (Vec::new(), Vec::new());
            if !pos.is_empty() {
                for &p in &pos {
                    if neg.iter().any(|&q| sim.get(i, p) < sim.get(i, q) + eps) {
                        want_p.push(p);
                    }
                }
                for &q in &neg {
                    if pos.iter().any(|&p| sim.get(i, q) > sim.get(i, p) - eps) {
                        want_n.push(q);
                    }
                }
            }
            prop_assert_eq!(&mined.positives[i], &want_p);
            prop_assert_eq!(&mined.negatives[i], &want_n);
        }
    }

    #[test]
    fn ms_gradient_signs(places in 2usize..5, d in 2usize..6, seed in any::<u64>()) {
        let n = places * 2;
        let g = unit_rows(n, d, seed).cast::<f64>();
        let sim = matmul_nt(&g, &g).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let mined = mine_pairs(&sim, &labels, 0.1).unwrap();
        let out = ms_loss(&sim, &mined, &MsParams::default());
        prop_assert!(out.loss >= 0.0);
        for i in 0..n {
            for &p in &mined.positives[i] {
                prop_assert!(out.d_sim.get(i, p) <= 0.0);
            }
            for &q in &mined.negatives[i] {
                prop_assert!(out.d_sim.get(i, q) >= 0.0);
            }
        }
    }

    #[test]
    fn loss_ignores_label_names(places in 2usize..5, d in 2usize..6, seed in any::<u64>(), shift in 1usize..100) {
        let n = places * 3;
        let g = unit_rows(n, d, seed).cast::<f64>();
        let sim = matmul_nt(&g, &g).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i / 3).collect();
        let renamed: Vec<String> = labels.iter().map(|l| format!("place-{}", (l * 7 + shift) % 1000)).collect();
        let p = MsParams::default();
        let a = ms_loss(&sim, &mine_pairs(&sim, &labels, p.epsilon).unwrap(), &p);
        let b = ms_loss(&sim, &mine_pairs(&sim, &renamed, p.epsilon).unwrap(), &p);
        prop_assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn cosine_and_euclidean_rankings_agree(n in 2usize..20, d in 1usize..8, seed in any::<u64>()) {
        let db = unit_rows(n, d, seed);
        let q = unit_rows(1, d, seed ^ 5);
        let index = DescriptorIndex::build((0..n).map(|i| (format!("db{i:03}"), db.row(i).to_vec()))).unwrap();
        let ranked = index.rank_all(q.row(0)).unwrap();
        let dist = |id: &str| {
            let i: usize = id[2..].parse().unwrap();
            db.row(i).iter().zip(q.row(0)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        };
        for w in ranked.windows(2) {
            prop_assert!(dist(&w[0].id) <= dist(&w[1].id) + 1e-9);
        }
    }

    #[test]
    fn token_files_round_trip_bit_exact(h in 1usize..6, w in 1usize..6, d in 1usize..10, seed in any::<u64>(), tag in 0u8..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(h * w, d, |_, _| f32::from_bits(rng.random::<u32>() & 0x3fff_ffff));
        let source = Source::from_tag(tag).unwrap();
        let bytes = encode_tokens(&m, source, (h, w)).unwrap();
        let (back, s, grid) = decode_tokens(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(s, source);
        prop_assert_eq!(grid, (h, w));
        let same = m.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn batches_hold_each_place_k_times(places in 2usize..12, per in 2usize..5, k in 1usize..3, seed in any::<u64>(), epoch in 0u64..4) {
        let labels: Vec<usize> = (0..places * per).map(|i| i / per).collect();
        let ppb = 2.min(places);
        let s = PlaceBalancedSampler::new(&labels, ppb, k.min(per), seed).unwrap();
        for batch in s.epoch(epoch) {
            let mut counts = BTreeMap::new();
            for it in &batch {
                prop_assert_eq!(labels[it.image], it.label);
                *counts.entry(it.label).or_insert(0) += 1;
            }
            prop_assert_eq!(counts.len(), ppb);
            prop_assert!(counts.values().all(|&c| c == k.min(per)));
        }
    }
}
