use epgt_core::geometry::{singular_ratio, FundamentalMatrix};
use epgt_core::probing::{
    evaluate_probe, linear_embedding_samples, probe_forward, sampson_loss, train_probe, Aggregate,
    LinearEmbedding, ProbeSample, ProbeTrainConfig,
};
use epgt_core::rng::derive_seed;
use epgt_core::scene::{generate_scene_retrying, CameraConfigMode, SceneConfig, FOCAL_LENGTHS_MM};

fn samples(n: usize, base: u64) -> Vec<ProbeSample> {
    let scenes: Vec<_> = (0..n)
        .map(|i| {
            let mode = CameraConfigMode::ALL[i % 4];
            let focal = FOCAL_LENGTHS_MM[(i / 4) % 7];
            generate_scene_retrying(
                &SceneConfig::new(mode, focal, 100, derive_seed(base, &[i as u64])),
                50,
            )
            .unwrap()
        })
        .collect();
    linear_embedding_samples(&LinearEmbedding::new(64, 5), &scenes)
}

#[test]
fn oracle_training_loss_never_jumps() {
    let trained = train_probe(0, &samples(200, 1), &ProbeTrainConfig::default()).unwrap();
    let losses = &trained.epoch_losses;
    assert_eq!(losses.len(), 50);
    for (epoch, pair) in losses.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] * 1.1,
            "epoch {}: {} after {}",
            epoch + 1,
            pair[1],
            pair[0]
        );
    }
    assert!(losses[49] < losses[0]);
}

#[test]
fn rank_two_emerges_without_projection() {
    let train = samples(200, 1);
    let held = samples(50, 2);
    let trained = train_probe(0, &train, &ProbeTrainConfig::default()).unwrap();
    let ratios: Vec<f64> = held
        .iter()
        .map(|s| {
            let f = FundamentalMatrix::from_matrix(
                &probe_forward(&trained.model, &s.features).unwrap(),
            )
            .unwrap();
            singular_ratio(&f)
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean <= 1e-2, "mean sigma3/sigma1 {mean}");
    let row = evaluate_probe(&trained.model, &held, "test", Aggregate::Mean).unwrap();
    assert!((row.singular_ratio - mean).abs() <= 1e-12 * mean.max(1.0));
}

#[test]
fn training_is_bit_deterministic() {
    let train = samples(40, 3);
    let cfg = ProbeTrainConfig {
        epochs: 3,
        ..ProbeTrainConfig::default()
    };
    let a = train_probe(2, &train, &cfg).unwrap();
    let b = train_probe(2, &train, &cfg).unwrap();
    let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model.parameters()), bits(&b.model.parameters()));
    let reseeded = train_probe(
        2,
        &train,
        &ProbeTrainConfig {
            seed: cfg.seed + 1,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(
        bits(&a.model.parameters()),
        bits(&reseeded.model.parameters())
    );
}

#[test]
fn evaluation_ignores_the_scale_of_f() {
    let held = samples(10, 4);
    let trained = train_probe(
        0,
        &samples(20, 5),
        &ProbeTrainConfig {
            epochs: 2,
            ..ProbeTrainConfig::default()
        },
    )
    .unwrap();
    for s in &held {
        let f = probe_forward(&trained.model, &s.features).unwrap();
        let base = sampson_loss(&f, &s.corrs).unwrap().value;
        for scale in [-3.0, 1e-6, 1e6] {
            let scaled = sampson_loss(&(f * scale), &s.corrs).unwrap().value;
            assert!(
                (scaled - base).abs() <= 1e-9 * base,
                "scale {scale}: {scaled} vs {base}"
            );
        }
    }
}
