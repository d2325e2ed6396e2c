// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use spd_core::checkpoint::Checkpoint;
use spd_core::experiment::preset;
use spd_core::metrics::{heatmap_from_importances, ml2r, mmcs};
use spd_core::spd::sample_masks;
use spd_core::tensor::DenseMatrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |d| DenseMatrix::from_vec(rows, cols, d).unwrap())
}

/// `(W, U, V)` with compatible shapes, up to 5 × 5 and 5 subcomponents.
fn factored() -> impl Strategy<Value = (DenseMatrix, DenseMatrix, DenseMatrix)> {
    (1usize..=5, 1usize..=5, 1usize..=5)
        .prop_flat_map(|(d, n, c)| (matrix(d, n), matrix(d, c), matrix(c, n)))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmcs_matches_exhaustive_double_loop((w, u, v) in factored()) {
        let got = mmcs(&w, &u, &v).unwrap();
        prop_assume!(!got.features.is_empty());
        let (d, n) = w.shape();
        let mut sum = 0.0;
        let mut count = 0;
        for j in 0..n {
            let wj = w.column(j);
            if wj.iter().all(|&x| x == 0.0) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for c in 0..u.cols() {
                let contrib: Vec<f64> = (0..d).map(|i| u.get(i, c) * v.get(c, j)).collect();
                best = best.max(cosine(&contrib, &wj));
            }
            sum += best;
            count += 1;
        }
        prop_assert!((got.mean - sum / count as f64).abs() < 1e-12);
    }

    #[test]
    fn scaling_contributions_keeps_mmcs_and_scales_ml2r((w, u, v) in factored(), lambda in 0.1..10.0f64) {
        let m = mmcs(&w, &u, &v).unwrap();
        prop_assume!(!m.features.is_empty());
        let r = ml2r(&w, &u, &v, &m).unwrap();
        let us = u.scale(lambda);
        let ms = mmcs(&w, &us, &v).unwrap();
        let rs = ml2r(&w, &us, &v, &ms).unwrap();
        prop_assert!((ms.mean - m.mean).abs() < 1e-12);
        prop_assert!((rs.mean - lambda * r.mean).abs() < 1e-9 * (1.0 + rs.mean.abs()));
    }

    #[test]
    fn heatmap_permutation_is_a_deterministic_bijection(g in (1usize..8, 1usize..10).prop_flat_map(|(n, c)| matrix(n, c))) {
        let h = heatmap_from_importances("W", &g);
        let mut sorted = h.permutation.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..g.cols()).collect::<Vec<_>>());
        prop_assert_eq!(heatmap_from_importances("W", &g), h.clone());
        for i in 0..g.rows() {
            for c in 0..g.cols() {
                prop_assert_eq!(h.original(i, c), g.get(i, c).clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn masks_lie_between_importance_and_one(
        g in prop::collection::vec(0.0..=1.0f64, 1..60),
        seed in any::<u64>(),
        step in 0u64..1000,
    ) {
        let gm = DenseMatrix::from_vec(1, g.len(), g.clone()).unwrap();
        let s = sample_masks(&[gm], seed, step, 0);
        for ((&m, &gi), &r) in s.m[0].data().iter().zip(&g).zip(s.r[0].data()) {
            prop_assert!(m >= gi && m <= 1.0);
            prop_assert_eq!(m, gi + (1.0 - gi) * r);
            if gi == 1.0 {
                prop_assert_eq!(m, 1.0);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(a in matrix(3, 4), b in matrix(1, 7), tag in "[a-z]{1,8}") {
        let mut ck = Checkpoint::new(tag.clone(), serde_json::json!({ "k": tag }));
        ck.push("a", a);
        ck.push("b.c", b);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml(
        beta3 in 1e-6..1.0f64,
        p in 0.1..3.0f64,
        c in 1usize..500,
        lr in 1e-5..1e-1f64,
        seeds in prop::collection::vec(any::<u32>(), 1..4),
    ) {
        let mut cfg = preset("tms_5_2").unwrap();
        cfg.spd.beta3 = beta3;
        cfg.spd.p = p;
        cfg.spd.n_subcomponents = c;
        cfg.spd.optimizer.lr = lr;
        cfg.seeds = seeds.into_iter().map(u64::from).collect();
        let text = cfg.to_toml_string().unwrap();
        let back = spd_core::config::ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
