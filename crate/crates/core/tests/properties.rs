//! Invariants of the metrics, losses, prior and config, checked on random inputs.

use catstyle_core::config::ExperimentConfig;
use catstyle_core::eval::{accuracy, ari, confusion, nmi};
use catstyle_core::losses::{aug_kl_value, mi_loss_value, negative_pairing, pairing_from_offset};
use catstyle_core::prior::{interpolate, sample_prior};
use catstyle_core::rng::{stream, Stream};
use catstyle_core::tensor::Tensor;
use proptest::prelude::*;

fn labelling(max_k: usize, max_n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1..=max_k, 2..=max_n)
        .prop_flat_map(move |(k, n)| (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_ignore_cluster_names((y, p) in labelling(6, 60), shift in 1usize..7) {
        let k = p.iter().max().unwrap() + 1;
        let renamed: Vec<usize> = p.iter().map(|&c| (c + shift) % (k + shift)).collect();
        let (a0, _) = accuracy(&y, &p).unwrap();
        let (a1, _) = accuracy(&y, &renamed).unwrap();
        prop_assert!((a0 - a1).abs() < 1e-12);
        prop_assert!((nmi(&y, &p).unwrap() - nmi(&y, &renamed).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&y, &p).unwrap() - ari(&y, &renamed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges_and_symmetry((y, p) in labelling(6, 60)) {
        let (acc, mapping) = accuracy(&y, &p).unwrap();
        let largest = *confusion(&y, &p).unwrap().iter().flatten().max().unwrap() as f64;
        prop_assert!(acc <= 1.0 + 1e-12);
        // the best matching is at least as good as using its largest cell alone
        prop_assert!(acc * y.len() as f64 >= largest - 1e-9);
        let mut seen = std::collections::HashSet::new();
        prop_assert!(mapping.iter().all(|&(c, _)| seen.insert(c)));
        let m = nmi(&y, &p).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m));
        prop_assert!((m - nmi(&p, &y).unwrap()).abs() < 1e-12);
        let r = ari(&y, &p).unwrap();
        prop_assert!(r <= 1.0 + 1e-12);
        prop_assert!((r - ari(&p, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_labellings_score_one(y in prop::collection::vec(0usize..5, 2..50)) {
        prop_assert_eq!(accuracy(&y, &y).unwrap().0, 1.0);
        prop_assert!((nmi(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ari(&y, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_every_sample((y, p) in labelling(5, 40)) {
        let c = confusion(&y, &p).unwrap();
        prop_assert_eq!(c.iter().flatten().sum::<u64>() as usize, y.len());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal((p, q) in (2usize..8).prop_flat_map(|k| (simplex(k), simplex(k)))) {
        prop_assert!(aug_kl_value(&p, &q).unwrap() >= -1e-12);
        prop_assert!(aug_kl_value(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mi_loss_is_positive_and_falls_with_separation(
        logits in prop::collection::vec(-20.0f64..20.0, 1..16),
        margin in 0.1f64..5.0,
    ) {
        let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
        let l = mi_loss_value(&logits, &neg).unwrap();
        prop_assert!(l.is_finite() && l > 0.0);
        let pos2: Vec<f64> = logits.iter().map(|v| v + margin).collect();
        let neg2: Vec<f64> = neg.iter().map(|v| v - margin).collect();
        prop_assert!(mi_loss_value(&pos2, &neg2).unwrap() < l);
    }

    #[test]
    fn negative_pairing_is_a_derangement(m in 2usize..200, seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::Pairing);
        let j = negative_pairing(m, &mut rng).unwrap();
        let mut sorted = j.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..m).collect::<Vec<_>>());
        prop_assert!(j.iter().enumerate().all(|(i, &ji)| i != ji));
    }

    #[test]
    fn pairing_offsets_compose(m in 2usize..50, a in 1usize..50, b in 1usize..50) {
        let (a, b) = (a % m, b % m);
        let pa = pairing_from_offset(m, a);
        let pb = pairing_from_offset(m, b);
        let composed: Vec<usize> = pa.iter().map(|&i| pb[i]).collect();
        prop_assert_eq!(composed, pairing_from_offset(m, (a + b) % m));
    }

    #[test]
    fn interpolates_lie_on_the_segment(
        pair in (1usize..10).prop_flat_map(|d| (prop::collection::vec(-3.0f64..3.0, d), prop::collection::vec(-3.0f64..3.0, d))),
        eps in 0.0f64..=1.0,
    ) {
        let (z, zt) = pair;
        let h = interpolate(&z, &zt, eps).unwrap();
        for ((&a, &b), &c) in z.iter().zip(&zt).zip(&h) {
            prop_assert!(c >= a.min(b) - 1e-12 && c <= a.max(b) + 1e-12);
        }
        let d_total: f64 = z.iter().zip(&zt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d_to_tilde: f64 = h.iter().zip(&zt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((d_to_tilde - eps * d_total).abs() < 1e-9);
    }

    #[test]
    fn prior_rows_are_one_hot_then_style(n in 1usize..40, k in 2usize..12, ds in 0usize..8, seed in any::<u64>()) {
        let z: Tensor<f64> = sample_prior(n, k, ds, 0.1, &mut stream(seed, Stream::Prior));
        prop_assert_eq!(z.shape(), &[n, k + ds]);
        for i in 0..n {
            let cat = &z.row(i)[..k];
            prop_assert_eq!(cat.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(cat.iter().filter(|&&v| v == 0.0).count(), k - 1);
        }
    }

    #[test]
    fn saved_configs_reload_identically(
        k in 2usize..20,
        ds in 0usize..64,
        seed in 0..=i64::MAX as u64,
        beta_aug in 0.0f64..8.0,
        aug in any::<bool>(),
    ) {
        let cfg = ExperimentConfig::from_toml_str(&format!(
            "dataset_name = \"fashion_mnist\"\nnum_clusters = {k}\nstyle_dim = {ds}\nseed = {seed}\nbeta_aug = {beta_aug:?}\n[augmentation]\nenabled = {aug}\n"
        )).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut cfg = ExperimentConfig::from_toml_str("dataset_name = \"mnist\"").unwrap();
        cfg.seed = seed;
        prop_assert!(cfg.validate().is_err());
    }
}
