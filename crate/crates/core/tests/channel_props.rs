use num_complex::Complex64;
use proptest::prelude::*;
use wisp_core::channel::{self, NoiseLevel, PathKind, PathSpec, PhaseErrorModel, Scene};

fn one_rx() -> Scene {
    let mut s = Scene::default_3rx();
    s.rx.truncate(1);
    s
}

fn path() -> impl Strategy<Value = PathSpec> {
    (-1.4f64..1.4, 0.0f64..120e-9, 0.05f64..2.0, -3.2f64..3.2).prop_map(|(aoa, tof, a, ph)| PathSpec {
        aoa_rad: aoa,
        tof_s: tof,
        attenuation: Complex64::from_polar(a, ph),
        kind: PathKind::StaticReflection,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noiseless_csi_is_linear_in_paths(paths in prop::collection::vec(path(), 1..4), eps in -3.2f64..3.2) {
        let scene = one_rx();
        let all = channel::noiseless_frame(&scene, &paths, eps);
        let mut sum = channel::noiseless_frame(&scene, &paths[..1], eps);
        for p in &paths[1..] {
            sum = sum.add(&channel::noiseless_frame(&scene, std::slice::from_ref(p), eps)).unwrap();
        }
        prop_assert!(all.sub(&sum).unwrap().frobenius_norm() <= 1e-9 * (1.0 + all.frobenius_norm()));
    }

    #[test]
    fn magnitude_ignores_phase_error(paths in prop::collection::vec(path(), 1..4), eps in -3.2f64..3.2) {
        let scene = one_rx();
        let a = channel::noiseless_frame(&scene, &paths, eps);
        let b = channel::noiseless_frame(&scene, &paths, 0.0);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x.norm() - y.norm()).abs() <= 1e-12 * (1.0 + y.norm()));
        }
    }

    #[test]
    fn same_seed_same_streams(seed in any::<u64>()) {
        let scene = Scene::default_3rx();
        let truth = channel::ground_truth_paths(&scene).unwrap();
        let a = channel::synthesize_csi(&scene, &truth, NoiseLevel::SnrDb(15.0), PhaseErrorModel::UniformPerFrame, 3, seed).unwrap();
        let b = channel::synthesize_csi(&scene, &truth, NoiseLevel::SnrDb(15.0), PhaseErrorModel::UniformPerFrame, 3, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn empirical_noise_power_matches_variance(seed in any::<u64>(), var in 1e-4f64..1.0) {
        let scene = one_rx();
        let truth = channel::ground_truth_paths(&scene).unwrap();
        // 14 frames x 3 antennas x 256 subcarriers > 1e4 samples.
        let streams = channel::synthesize_csi(&scene, &truth, NoiseLevel::Variance(var), PhaseErrorModel::UniformPerFrame, 14, seed).unwrap();
        let s = &streams[0];
        let (mut acc, mut n) = (0.0, 0usize);
        for (f, eps) in s.frames.iter().zip(&s.phase_errors_rad) {
            let clean = channel::noiseless_frame(&scene, &truth[0], *eps);
            for (x, y) in f.as_slice().iter().zip(clean.as_slice()) {
                acc += (x - y).norm_sqr();
                n += 1;
            }
        }
        prop_assert!(n >= 10_000);
        prop_assert!((acc / n as f64 / var - 1.0).abs() < 0.05, "{} vs {var}", acc / n as f64);
    }
}
