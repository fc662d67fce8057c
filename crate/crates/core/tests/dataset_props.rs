use proptest::prelude::*;

use tpgan::dataset::{self, FaceParams, FaceSample, OccludedSide, LANDMARK_MARGIN, SUPPORTED_YAWS};

fn sample(seed: u64, identity: u32, yaw: i32) -> FaceSample {
    let face = FaceParams::sample(seed, identity);
    FaceSample {
        profile_image: face.render(yaw),
        frontal_image: face.render(0),
        landmarks_profile: face.landmarks(yaw),
        identity,
        yaw_degrees: yaw,
        occluded: face.occluded_side(yaw),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn landmarks_respect_margin(seed in 0u64..1_000_000, id in 0u32..10_000, yi in 0..SUPPORTED_YAWS.len()) {
        let lms = FaceParams::sample(seed, id).landmarks(SUPPORTED_YAWS[yi]);
        for p in lms.0 {
            prop_assert!(p.x >= LANDMARK_MARGIN && p.x <= 128.0 - LANDMARK_MARGIN, "x = {}", p.x);
            prop_assert!(p.y >= LANDMARK_MARGIN && p.y <= 128.0 - LANDMARK_MARGIN, "y = {}", p.y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn canonical_samples_occlude_the_right(seed in 0u64..1000, id in 0u32..100, yi in 0..SUPPORTED_YAWS.len()) {
        let yaw = SUPPORTED_YAWS[yi];
        let c = dataset::canonicalize_flip(&sample(seed, id, yaw));
        prop_assert!(c.yaw_degrees >= 0);
        if yaw == 0 {
            prop_assert_eq!(c.occluded, OccludedSide::None);
        } else {
            prop_assert_eq!(c.occluded, OccludedSide::Right);
        }
        prop_assert!(c.validate().is_ok());
    }

    #[test]
    fn mirror_is_an_involution(seed in 0u64..1000, id in 0u32..100, yi in 0..SUPPORTED_YAWS.len()) {
        let s = sample(seed, id, SUPPORTED_YAWS[yi]);
        prop_assert_eq!(dataset::mirror(&dataset::mirror(&s)), s);
    }
}

#[test]
fn generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = dataset::generate_synthetic(2, &[0, 30, -60], 5, a.path()).unwrap();
    let mb = dataset::generate_synthetic(2, &[0, 30, -60], 5, b.path()).unwrap();
    assert_eq!(ma.len(), mb.len());
    assert_eq!(ma.load_all().unwrap(), mb.load_all().unwrap());
}

#[test]
fn benchmark_keeps_probe_identities_out_of_training() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dataset::generate_benchmark(3, 2, &[0, 45, -90], 1, dir.path()).unwrap();
    let train = bench.train.identities();
    assert!(bench.probe.identities().is_disjoint(&train));
    assert_eq!(bench.gallery.identities(), bench.probe.identities());
    assert!(bench.probe.load_all().unwrap().iter().all(|s| s.yaw_degrees != 0));
}
