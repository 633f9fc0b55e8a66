use epgt_core::attention::{
    matching_accuracy, patch_columns, token_at, token_index, ArgmaxScope, SEQ_LEN,
};
use epgt_core::geometry::{compose_fundamental, rank2_project, Correspondence};
use epgt_core::interventions::{simulate_knockout, HeadTarget, InterventionSpec, KnockoutMode};
use epgt_core::report::fmt_num;
use epgt_core::robustness::{ConditionRow, Method, Trial};
use epgt_core::scene::{
    generate_scene_retrying, pixel_to_patch, CameraConfigMode, Direction, SceneConfig, ScenePair,
    FOCAL_LENGTHS_MM,
};
use epgt_core::tensor_io::{decode, AttentionRecord, AttentionSpace, Tensor, TensorData};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene_strategy() -> impl Strategy<Value = ScenePair> {
    (0..4usize, 0..7usize, any::<u64>()).prop_map(|(m, f, seed)| {
        let cfg = SceneConfig::new(CameraConfigMode::ALL[m], FOCAL_LENGTHS_MM[f], 40, seed);
        generate_scene_retrying(&cfg, 50).unwrap()
    })
}

fn matrix_strategy() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform9(-1.0f64..1.0).prop_map(|a| Matrix3::from_row_slice(&a))
}

fn same_up_to_scale(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let (a, b) = (a / a.norm(), b / b.norm());
    (a - b).norm().min((a + b).norm())
}

fn random_record(heads: u32, seed: u64) -> AttentionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = heads as usize * SEQ_LEN as usize * SEQ_LEN as usize;
    AttentionRecord::dense(
        9,
        heads,
        AttentionSpace::Logits,
        (0..n).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ground_truth_satisfies_the_epipolar_constraint(s in scene_strategy()) {
        for c in &s.corrs {
            prop_assert!(s.f_gt.algebraic_error(c).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampson_is_scale_invariant(m in matrix_strategy(), p in prop::array::uniform4(0.0f64..518.0)) {
        let c = Correspondence::new(p[0], p[1], p[2], p[3], 0);
        let f = *rank2_project(&m).unwrap().matrix();
        if let Ok(base) = epgt_core::geometry::sampson_error_raw(&f, &c) {
            for s in [1e-6, 1.0, 1e6] {
                let scaled = epgt_core::geometry::sampson_error_raw(&(f * s), &c).unwrap();
                prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1e-300), "{s}: {scaled} vs {base}");
            }
        }
    }

    #[test]
    fn rank2_projection_is_idempotent(m in matrix_strategy()) {
        let p = rank2_project(&m).unwrap();
        let pp = rank2_project(p.matrix()).unwrap();
        prop_assert!(same_up_to_scale(p.matrix(), pp.matrix()) <= 1e-12);
        let [s1, _, s3] = p.singular_values();
        prop_assert!(s3 <= 1e-12 * s1);
    }

    #[test]
    fn swapping_cameras_transposes_f(s in scene_strategy()) {
        let f12 = compose_fundamental(&s.cam1, &s.cam2).unwrap();
        let f21 = compose_fundamental(&s.cam2, &s.cam1).unwrap();
        prop_assert!(same_up_to_scale(f12.matrix(), &f21.matrix().transpose()) <= 1e-9);
    }

    #[test]
    fn epipoles_are_projected_camera_centers(s in scene_strategy()) {
        let f = s.f_gt.matrix();
        let k = |cam: &epgt_core::geometry::CameraModel, x: &Vector3<f64>| {
            let h = cam.intrinsics() * cam.to_camera(x);
            h / h.norm()
        };
        let e1 = k(&s.cam1, &s.cam2.center());
        let e2 = k(&s.cam2, &s.cam1.center());
        prop_assert!((f * e1).norm() <= 1e-9);
        prop_assert!((f.transpose() * e2).norm() <= 1e-9);
    }

    #[test]
    fn correspondences_are_visible_and_patch_consistent(s in scene_strategy()) {
        let (w, h) = s.cam1.image_size();
        for c in &s.corrs {
            for p in [c.p1(), c.p2()] {
                prop_assert!(p.x > 0.0 && p.y > 0.0 && p.x < f64::from(w) && p.y < f64::from(h));
            }
            let point = s.point(c.point_id).unwrap().position();
            prop_assert!((s.cam1.project(&point).unwrap() - c.p1()).norm() <= 1e-9);
            let (p1, p2) = (pixel_to_patch(&c.p1()).unwrap(), pixel_to_patch(&c.p2()).unwrap());
            prop_assert!(s.patch_corrs.targets(Direction::OneToTwo, p1).is_some_and(|t| t.contains(&p2)));
            prop_assert!(s.patch_corrs.targets(Direction::TwoToOne, p2).is_some_and(|t| t.contains(&p1)));
        }
    }

    #[test]
    fn token_layout_is_bijective(position in 0..SEQ_LEN) {
        let (view, token) = token_at(position).unwrap();
        prop_assert_eq!(token_index(view, token).unwrap(), position);
    }

    #[test]
    fn tensors_roundtrip(
        shape in prop::sample::select(vec![vec![], vec![7u64], vec![2, 3, 4]]),
        dtype in 0..3u8,
        seed in any::<u64>(),
    ) {
        let n: u64 = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = match dtype {
            0 => TensorData::F32((0..n).map(|_| rng.random()).collect()),
            1 => TensorData::F64((0..n).map(|_| rng.random()).collect()),
            _ => TensorData::U32((0..n).map(|_| rng.random()).collect()),
        };
        let t = Tensor::new(shape, data).unwrap();
        let bytes = t.encode();
        prop_assert_eq!(&bytes[..4], b"EPGT");
        prop_assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        prop_assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn failure_rates_are_bounded(outcomes in prop::collection::vec((any::<bool>(), 0.0f64..20.0), 0..30)) {
        let trials: Vec<Trial> = outcomes
            .iter()
            .map(|&(failure, px)| Trial { failure, median_root_sampson_px: Some(px) })
            .collect();
        let row = ConditionRow::reduce("c".into(), None, None, Method::EightPointOnFile, &trials);
        prop_assert!((0.0..=1.0).contains(&row.failure_rate));
        if trials.iter().all(|t| t.failure) {
            prop_assert_eq!(row.failure_rate, 1.0);
            prop_assert_eq!(row.median_root_sampson_px, None);
        }
    }

    #[test]
    fn numbers_format_to_nine_significant_digits(v in -1e12f64..1e12) {
        let s = fmt_num(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-9 * v.abs().max(1e-300));
        let digits = s.trim_start_matches('-').split(['e', 'E']).next().unwrap().chars().filter(char::is_ascii_digit);
        prop_assert!(digits.count() <= 9, "{}", s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn sparse_records_keep_every_argmax(seed in any::<u64>(), k in 1u32..4) {
        let dense = random_record(1, seed);
        let round = dense.to_sparse(k).unwrap().to_dense();
        for q in (0..SEQ_LEN).step_by(7) {
            prop_assert_eq!(dense.global_maximum(0, q), round.global_maximum(0, q));
            prop_assert_eq!(dense.target_maximum(0, q), round.target_maximum(0, q));
        }
    }

    #[test]
    fn matching_ignores_non_target_columns(seed in any::<u64>(), s in scene_strategy()) {
        let mut rec = random_record(1, seed);
        let before: Vec<_> = Direction::BOTH
            .iter()
            .map(|&d| matching_accuracy(&rec, &s.patch_corrs, d, ArgmaxScope::TargetPatches).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for q in 0..SEQ_LEN {
            let target = patch_columns(if q < SEQ_LEN / 2 { 1 } else { 0 });
            for (col, v) in rec.row_mut(0, q).unwrap().iter_mut().enumerate() {
                if !target.contains(&(col as u32)) {
                    *v = rng.random_range(0.0..10.0);
                }
            }
        }
        let after: Vec<_> = Direction::BOTH
            .iter()
            .map(|&d| matching_accuracy(&rec, &s.patch_corrs, d, ArgmaxScope::TargetPatches).unwrap())
            .collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn knockouts_touch_only_their_targets(seed in any::<u64>(), s in scene_strategy()) {
        let rec = random_record(2, seed);
        let target = vec![HeadTarget { layer: 9, head: 0 }];
        let mut probs = rec.clone();
        probs.space = AttentionSpace::Probabilities;
        for h in 0..2 {
            for q in 0..SEQ_LEN {
                let row = probs.row_mut(h, q).unwrap();
                let sum: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let full = simulate_knockout(&probs, &InterventionSpec::new("f", KnockoutMode::FullMapZero, target.clone()), None)
            .unwrap();
        for q in 0..SEQ_LEN {
            prop_assert!(full.row(0, q).unwrap().iter().all(|&v| v == 0.0));
            let (a, b) = (full.row(1, q).unwrap(), probs.row(1, q).unwrap());
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let resoft = simulate_knockout(
            &rec,
            &InterventionSpec::new("t", KnockoutMode::TargetedZeroResoftmax, target),
            Some(&s.patch_corrs),
        )
        .unwrap();
        for dir in Direction::BOTH {
            for (&src, targets) in s.patch_corrs.map(dir) {
                let q = token_index(u32::from(dir.source_view()), epgt_core::attention::Token::Patch(src)).unwrap();
                let row = resoft.row(0, q).unwrap();
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-5);
                let cols = patch_columns(u32::from(dir.target_view()));
                for (patch, col) in cols.enumerate() {
                    let zero = row[col as usize] == 0.0;
                    prop_assert_eq!(zero, targets.contains(&(patch as u32)));
                }
            }
        }
    }
}
