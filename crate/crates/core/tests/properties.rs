use foe_tta::bench::{paired_permutation_test, parse_metrics, render_metrics, MetricsRow};
use foe_tta::divergence::{kl_gaussian, kl_gaussian_tape, kl_grid};
use foe_tta::pca::fit_pca;
use foe_tta::prior::{gaussian_grid, grouped_moments, kde_grid, moments, silverman_alpha};
use foe_tta::synth::{apply_shift, generate_subject, normalize_intensities, BiasField, ShiftParams};
use foe_tta::tensor::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_identity(
        m1 in -3.0f64..3.0, s1 in 0.05f64..3.0, m2 in -3.0f64..3.0, s2 in 0.05f64..3.0,
    ) {
        prop_assert!(kl_gaussian(m1, s1, m2, s2).unwrap() >= -1e-12);
        prop_assert!(kl_gaussian(m1, s1, m1, s1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tape_kl_matches_plain_kl(
        ms in proptest::collection::vec((-2.0f64..2.0, 0.1f64..2.0, -2.0f64..2.0, 0.1f64..2.0), 1..6),
    ) {
        let mut tape = Tape::new();
        let mu_s: Vec<f64> = ms.iter().map(|m| m.0).collect();
        let sig_s: Vec<f64> = ms.iter().map(|m| m.1).collect();
        let mu_t = tape.constant(Tensor::from_vec(ms.iter().map(|m| m.2).collect()));
        let var_t = tape.constant(Tensor::from_vec(ms.iter().map(|m| m.3 * m.3).collect()));
        let kl = kl_gaussian_tape(&mut tape, &mu_s, &sig_s, mu_t, var_t).unwrap();
        for (i, m) in ms.iter().enumerate() {
            let plain = kl_gaussian(m.0, m.1, m.2, m.3).unwrap();
            prop_assert!((tape.value(kl).data()[i] - plain).abs() < 1e-10 * plain.max(1.0));
        }
    }

    #[test]
    fn grid_kl_is_nonnegative(
        a in proptest::collection::vec(0.0f64..1.0, 32), b in proptest::collection::vec(0.01f64..1.0, 32),
    ) {
        prop_assume!(a.iter().sum::<f64>() > 0.0);
        let p = foe_tta::prior::GridPdf::new(-1.0, 1.0, a).unwrap().normalized().unwrap();
        let q = foe_tta::prior::GridPdf::new(-1.0, 1.0, b).unwrap().normalized().unwrap();
        prop_assert!(kl_grid(&p, &q).unwrap() >= -1e-9);
        prop_assert!(kl_grid(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gaussian_grids_integrate_to_one(mu in -2.0f64..2.0, sigma in 0.05f64..2.0, n in 32usize..512) {
        let g = gaussian_grid(mu, sigma, mu - 5.0 * sigma, mu + 5.0 * sigma, n).unwrap();
        prop_assert!((g.riemann_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kde_grid_is_a_density(samples in proptest::collection::vec(-1.0f64..1.0, 2..200)) {
        let m = moments(&samples).unwrap();
        let alpha = silverman_alpha(m.std().max(1e-3), samples.len());
        let g = kde_grid(&samples, -2.0, 2.0, 64, alpha).unwrap();
        prop_assert!((g.riemann_sum() - 1.0).abs() < 1e-9);
        prop_assert!(g.densities.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn equal_groups_moments_match_pooled_moments(
        data in proptest::collection::vec(-5.0f64..5.0, 2..5).prop_flat_map(|first| {
            let n = first.len();
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, n), 1..4)
                .prop_map(move |mut rest| { rest.insert(0, first.clone()); rest })
        }),
    ) {
        let grouped = grouped_moments(data.iter().map(|g| g.as_slice())).unwrap();
        let flat: Vec<f64> = data.concat();
        let pooled = moments(&flat).unwrap();
        prop_assert!((grouped.mean - pooled.mean).abs() < 1e-12);
        prop_assert!((grouped.var - pooled.var).abs() < 1e-10);
    }

    #[test]
    fn full_rank_pca_reconstructs(seed in 0u64..1000, r in 2usize..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = r * r;
        let patches: Vec<Vec<f64>> = (0..dim + 3).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = patches.iter().map(|p| p.as_slice()).collect();
        let basis = fit_pca(&refs, dim).unwrap();
        for w in basis.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
        for p in &patches {
            let back = basis.reconstruct(&basis.project(p).unwrap());
            for (a, b) in back.iter().zip(p) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_p_value_is_in_unit_interval_and_symmetric(
        pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = paired_permutation_test(&a, &b, 10_000, 3).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, paired_permutation_test(&b, &a, 10_000, 3).unwrap());
    }

    #[test]
    fn normalization_lands_in_unit_interval(v in proptest::collection::vec(-100.0f64..100.0, 10..300)) {
        let mut v = v;
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-6));
        if normalize_intensities(&mut v).is_ok() {
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn shifts_never_touch_labels(seed in 0u64..50, gamma in 0.3f64..3.0, amp in 0.0f64..0.5, noise in 0.0f64..0.05) {
        let s = generate_subject(seed, 2, 2, 16).unwrap();
        let p = ShiftParams { gamma, bias_field: BiasField { amplitude: amp, n_bumps: 3 }, noise_std: noise, brightness_offset: 0.0 };
        let t = apply_shift(&s, &p).unwrap();
        prop_assert_eq!(&t.labels, &s.labels);
        prop_assert!(t.slices.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn metrics_round_trip(
        rows in proptest::collection::vec((0usize..500, -1e6f64..1e6, proptest::option::of(-1e3f64..1e3), 0u32..3), 0..20),
    ) {
        let rows: Vec<MetricsRow> = rows
            .into_iter()
            .map(|(epoch, d, loss, domain)| MetricsRow {
                run_id: "r".into(),
                subject_id: format!("s{epoch}"),
                domain,
                method: "foe_cnn".into(),
                epoch,
                dice_mean: d,
                dice_per_class: vec![d, d / 3.0],
                loss_total: loss,
                loss_cnn: loss,
                loss_pca: None,
                phi_norm: loss,
                wall_ms: epoch as u128,
            })
            .collect();
        prop_assert_eq!(parse_metrics(&render_metrics(&rows)).unwrap(), rows);
    }
}
