use epgt_core::estimators::{
    eight_point, eight_point_unnormalized, ransac_fundamental, RansacConfig,
};
use epgt_core::geometry::{Correspondence, FundamentalMatrix};
use epgt_core::rng::{derive_seed, stream_rng};
use epgt_core::scene::{
    add_gaussian_noise, add_outliers, generate_scene_retrying, thin_correspondences,
    CameraConfigMode, SceneConfig, ScenePair, FOCAL_LENGTHS_MM,
};
use rand::seq::SliceRandom;

fn scene(i: u64, n_points: usize) -> ScenePair {
    let mode = CameraConfigMode::ALL[(i % 4) as usize];
    let focal = FOCAL_LENGTHS_MM[(i / 4 % 7) as usize];
    generate_scene_retrying(
        &SceneConfig::new(mode, focal, n_points, derive_seed(97, &[i])),
        50,
    )
    .unwrap()
}

fn median_sampson(f: &FundamentalMatrix, corrs: &[Correspondence]) -> f64 {
    let mut e: Vec<f64> = corrs
        .iter()
        .filter_map(|c| f.sampson_error(c).ok())
        .collect();
    e.sort_by(f64::total_cmp);
    e[e.len() / 2]
}

#[test]
fn normalization_is_necessary_under_noise() {
    let mut better = 0;
    for i in 0..100 {
        let s = scene(i, 100);
        let noisy = add_gaussian_noise(&s.corrs, 0.5, &mut stream_rng(i, 3));
        let normalized = median_sampson(&eight_point(&noisy).unwrap(), &noisy);
        let raw =
            eight_point_unnormalized(&noisy).map_or(f64::INFINITY, |f| median_sampson(&f, &noisy));
        if raw > normalized {
            better += 1;
        }
    }
    assert!(
        better >= 95,
        "normalized solver better on {better}/100 scenes"
    );
}

#[test]
fn eight_exact_points_recover_f() {
    for i in 0..40 {
        let s = scene(i, 60);
        let eight = thin_correspondences(&s.corrs, 8, &mut stream_rng(i, 4));
        let f = eight_point(&eight).unwrap();
        assert!(
            f.distance(&s.f_gt) <= 1e-5,
            "scene {i}: {}",
            f.distance(&s.f_gt)
        );
    }
}

#[test]
fn adding_exact_correspondences_never_hurts() {
    for i in 0..20 {
        let s = scene(i, 120);
        let mut corrs = s.corrs.clone();
        corrs.shuffle(&mut stream_rng(i, 5));
        let mut previous = f64::INFINITY;
        for n in (10..=corrs.len()).step_by(10) {
            let err = eight_point(&corrs[..n]).unwrap().distance(&s.f_gt);
            assert!(
                err <= previous.max(0.0) + 1e-9,
                "scene {i}, n {n}: {err} after {previous}"
            );
            previous = err;
        }
    }
}

#[test]
fn ransac_separates_inliers_from_outliers() {
    let mut exact = 0;
    for i in 0..40 {
        let s = scene(i, 150);
        let mut rng = stream_rng(i, 6);
        let inliers = thin_correspondences(&s.corrs, 70, &mut rng);
        let outliers = add_outliers(&s.f_gt, 30, 5.0, s.cam1.image_size(), 1 << 40, &mut rng);
        let mut all: Vec<Correspondence> = inliers.into_iter().chain(outliers).collect();
        all.shuffle(&mut rng);
        let truth: Vec<usize> = (0..all.len())
            .filter(|&k| all[k].point_id < 1 << 40)
            .collect();
        let mut found = ransac_fundamental(&all, &RansacConfig::with_seed(i))
            .unwrap()
            .inliers;
        found.sort_unstable();
        if found == truth {
            exact += 1;
        }
    }
    assert!(exact >= 38, "{exact}/40 exact inlier sets");
}

#[test]
fn ransac_is_deterministic_given_its_seed() {
    let s = scene(3, 150);
    let mut rng = stream_rng(3, 7);
    let noisy = add_gaussian_noise(&s.corrs, 0.5, &mut rng);
    let mut all = noisy.clone();
    all.extend(add_outliers(
        &s.f_gt,
        40,
        5.0,
        s.cam1.image_size(),
        1 << 40,
        &mut rng,
    ));
    let cfg = RansacConfig::with_seed(11);
    let a = ransac_fundamental(&all, &cfg).unwrap();
    let b = ransac_fundamental(&all, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |f: &FundamentalMatrix| f.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(a.fundamental.as_ref().unwrap()),
        bits(b.fundamental.as_ref().unwrap())
    );
}
