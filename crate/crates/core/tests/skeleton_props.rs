use proptest::prelude::*;
use wisp_core::cmatrix::RMatrix;
use wisp_core::skeleton::{self, PoseAdjacency, Sample, SkeletonPoints, KEYPOINTS, POSE_LEN};
use wisp_core::smsp::FeatureMatrix;

fn features(seed: u64) -> Vec<FeatureMatrix> {
    use rand::Rng as _;
    let mut r = wisp_core::rng::stream(seed, "features", 0);
    (0..3)
        .map(|_| FeatureMatrix {
            h_ph: RMatrix::from_fn(3, 256, |_, _| r.random_range(-6.0..6.0)),
            h_am: RMatrix::from_fn(3, 256, |_, _| r.random_range(0.0..4.0)),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn encoding_is_deterministic_and_shape_exact(seed in any::<u64>()) {
        let f = features(seed);
        let a = skeleton::encode_features(&f).unwrap();
        prop_assert_eq!(a.shape(), [150, 144, 144]);
        prop_assert_eq!(a.values.len(), 150 * 144 * 144);
        prop_assert!(a.values.iter().all(|v| v.is_finite()));
        prop_assert!(a == skeleton::encode_features(&f).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bilinear_stays_within_corners(h in prop::array::uniform4(-1e3f64..1e3), dr in 0.0f64..=1.0, dc in 0.0f64..=1.0) {
        let v = skeleton::bilinear(h[0], h[1], h[2], h[3], dr, dc);
        let lo = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn pairing_inverts_diagonal_embedding(pts in prop::collection::vec(prop::array::uniform2(0.0f64..=1.0), KEYPOINTS)) {
        let s = SkeletonPoints { points: pts };
        prop_assert_eq!(skeleton::pair_skeleton(&PoseAdjacency::from_points(&s)), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ridge_fit_beats_mean_predictor(seed in any::<u64>(), n in 3usize..12) {
        use rand::Rng as _;
        let mut r = wisp_core::rng::stream(seed, "fit", 0);
        let data: Vec<Sample> = (0..n)
            .map(|_| Sample {
                pooled: (0..skeleton::ENCODED_ROWS).map(|_| r.random_range(-1.0..1.0)).collect(),
                target: PoseAdjacency::from_values((0..POSE_LEN).map(|_| r.random_range(0.0..1.0)).collect()).unwrap(),
            })
            .collect();
        let model = skeleton::fit_baseline(&data, &skeleton::FitConfig::default()).unwrap();
        let base = skeleton::mean_predictor_mse(&data).unwrap();
        prop_assert!(model.train_mse <= base + 1e-12, "{} vs {base}", model.train_mse);
    }
}
