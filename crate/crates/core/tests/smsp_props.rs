use proptest::prelude::*;
use wisp_core::channel::{self, CsiStream, NoiseLevel, PhaseErrorModel, Point, Scene};
use wisp_core::rng::derive_seed;
use wisp_core::smsp::{self, LinkScores, RotationMode, SmspConfig};

fn scaled(stream: &CsiStream, c: f64) -> CsiStream {
    CsiStream {
        frames: stream.frames.iter().map(|f| f.scale(c)).collect(),
        ..stream.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn large_scale_scores_follow_receiver_order(x in 0.5f64..7.5, y in 0.5f64..7.5, rot in 0usize..3) {
        let scene = Scene::default_3rx();
        let mut permuted = scene.clone();
        permuted.rx.rotate_left(rot);
        let p = Point::new(x, y);
        let mut a = smsp::large_scale_scores(&p, &scene);
        a.rotate_left(rot);
        prop_assert_eq!(a, smsp::large_scale_scores(&p, &permuted));
    }

    #[test]
    fn small_scale_scores_follow_series_order(series in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 2..8), 1..5), rot in 0usize..4) {
        let rot = rot % series.len();
        let mut a = smsp::small_scale_scores(&series).unwrap();
        let mut permuted = series.clone();
        permuted.rotate_left(rot);
        a.rotate_left(rot);
        prop_assert_eq!(a, smsp::small_scale_scores(&permuted).unwrap());
    }

    #[test]
    fn nearest_link_scores_one(x in 0.3f64..7.7, y in 0.3f64..7.7) {
        let scene = Scene::default_3rx();
        let p = Point::new(x, y);
        let d = smsp::link_distances(&p, &scene);
        let s = smsp::large_scale_scores(&p, &scene);
        let q = (0..d.len()).min_by(|a, b| d[*a].total_cmp(&d[*b])).unwrap();
        prop_assert_eq!(s[q], 1.0);
        prop_assert!(s.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn rotation_keeps_magnitudes(theta in -1.5f64..1.5, tau in 0.0f64..100e-9, seed in any::<u64>()) {
        let scene = Scene::default_3rx();
        let truth = channel::ground_truth_paths(&scene).unwrap();
        let s = channel::synthesize_csi(&scene, &truth, NoiseLevel::SnrDb(20.0), PhaseErrorModel::UniformPerFrame, 1, seed).unwrap();
        let f = &s[0].frames[0];
        let r = smsp::rotate_csi(f, theta, tau, &scene).unwrap();
        for (a, b) in r.as_slice().iter().zip(f.as_slice()) {
            prop_assert!((a.norm() - b.norm()).abs() <= 1e-12 * (1.0 + b.norm()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scores_ignore_common_gain(seed in any::<u64>(), c in 1e-2f64..1e2) {
        let scene = Scene::default_3rx();
        let truth = channel::ground_truth_paths(&scene).unwrap();
        let streams = channel::synthesize_csi(&scene, &truth, NoiseLevel::SnrDb(20.0), PhaseErrorModel::UniformPerFrame, 8, seed).unwrap();
        let theta = 0.3;
        let s2 = |k: f64| {
            let series: Vec<Vec<f64>> = streams
                .iter()
                .map(|s| smsp::beam_power_series(&scaled(s, k), theta, &scene).unwrap())
                .collect();
            smsp::small_scale_scores(&series).unwrap()
        };
        for (a, b) in s2(1.0).iter().zip(&s2(c)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

/// Score-weighted complex sum of the rotated frames, projected on the
/// perfectly aligned noiseless user-only sum.
fn user_energy(scene: &Scene, snr: f64, seed: u64, mode: RotationMode) -> f64 {
    let mut truth = channel::ground_truth_paths(scene).unwrap();
    channel::randomize_phases(&mut truth, seed);
    let streams =
        channel::synthesize_csi(scene, &truth, NoiseLevel::SnrDb(snr), PhaseErrorModel::UniformPerFrame, 34, seed).unwrap();
    let cfg = SmspConfig::default();
    let out = smsp::run_smsp(scene, &streams, &cfg, Some(&truth)).unwrap();
    let scores = LinkScores { s1: out.scores.s1.clone(), s2: out.scores.s2.clone() };
    let rotated = smsp::rotate_streams(&streams, &out.receivers, scene, mode, Some(&truth)).unwrap();
    let mut total = 0.0;
    for u in 0..streams[0].len() {
        let refs: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(q, s)| {
                let user = truth[q].iter().find(|p| p.kind == channel::PathKind::UserReflection).unwrap();
                let comp = channel::noiseless_frame(scene, std::slice::from_ref(user), s.phase_errors_rad[u]);
                smsp::frame_rotation(s, u, &out.receivers[q], scene, RotationMode::GroundTruth, Some(user))
                    .unwrap()
                    .apply(&comp)
                    .unwrap()
            })
            .collect();
        let reference = smsp::coherent_sum(&refs, &scores).unwrap();
        let frames: Vec<_> = rotated.iter().map(|r| r[u].clone()).collect();
        total += smsp::projected_energy(&smsp::coherent_sum(&frames, &scores).unwrap(), &reference).unwrap();
    }
    total / streams[0].len() as f64
}

#[test]
fn rotation_raises_user_energy_at_every_snr() {
    let scene = Scene::default_3rx();
    for snr in [10.0, 20.0, 30.0] {
        let (mut on, mut off) = (0.0, 0.0);
        for trial in 0..20 {
            let seed = derive_seed(8, "energy", trial);
            on += user_energy(&scene, snr, seed, RotationMode::Estimated);
            off += user_energy(&scene, snr, seed, RotationMode::Disabled);
        }
        assert!(on > off, "{snr} dB: rotated {on} vs raw {off}");
    }
}
