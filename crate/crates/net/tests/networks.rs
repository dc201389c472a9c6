use depthprompt_core::{generate_scene, sample_random, ImageRaster, SceneSpec, SparseDepth};
use depthprompt_net::foundation::{image_tensor, restrict_to_biases};
use depthprompt_net::pyramid::ladder;
use depthprompt_net::{
    apply_bias_tuning, decode_affinity, encode_prompt, predict_relative, sample_gradient, Adam, AdamConfig,
    BackboneConfig, FoundationModel, LossConfig, NetError, ParamKind, ParamStore, PipelineConfig, PromptConfig, PromptModule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRaster {
    let values = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    ImageRaster::new(h, w, 3, values).unwrap()
}

fn module() -> PromptModule {
    PromptModule::new(PromptConfig::default(), &BackboneConfig::default(), 21).unwrap()
}

#[test]
fn garbage_at_invalid_pixels_does_not_reach_the_encoder() {
    let m = module();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (h, w) = (16, 12);
    let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.2)).collect();
    let clean: Vec<f32> = valid
        .iter()
        .map(|&v| if v { rng.random_range(0.5..8.0) } else { 0.0 })
        .collect();
    let dirty: Vec<f32> = clean
        .iter()
        .zip(&valid)
        .map(|(&c, &v)| if v { c } else { rng.random_range(-50.0..50.0) })
        .collect();
    let (a, _) = m.encode_masked(h, w, &clean, &valid).unwrap();
    let (b, _) = m.encode_masked(h, w, &dirty, &valid).unwrap();
    assert_eq!(a, b);
}

#[test]
fn all_invalid_prompt_is_finite_and_follows_the_ladder() {
    let m = module();
    let p = encode_prompt(&SparseDepth::empty(20, 13), &m).unwrap();
    assert!(p.is_finite());
    let dims: Vec<_> = p.shapes().iter().map(|s| (s.1, s.2)).collect();
    assert_eq!(dims, ladder(20, 13, 4));
}

#[test]
fn relative_depth_is_strictly_positive() {
    let model = FoundationModel::new(BackboneConfig::default(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let image = random_image(&mut rng, 8, 8);
        let (depth, pyramid) = predict_relative(&image, &model).unwrap();
        assert!(depth.values().iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(pyramid.is_finite());
    }
}

#[test]
fn relative_depth_is_deterministic() {
    let model = FoundationModel::new(BackboneConfig::default(), 3);
    let image = random_image(&mut ChaCha8Rng::seed_from_u64(2), 16, 16);
    assert_eq!(predict_relative(&image, &model).unwrap(), predict_relative(&image, &model).unwrap());
}

#[test]
fn decoded_affinity_is_finite_and_full_resolution() {
    let model = FoundationModel::new(BackboneConfig::default(), 4);
    let m = module();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w) in [(16, 16), (15, 9), (32, 24)] {
        let image = random_image(&mut rng, h, w);
        let (_, gt) = generate_scene(&SceneSpec::new(h, w, 3, (1.0, 9.0), 5)).unwrap();
        let sparse = sample_random(&gt, 10, 6).unwrap();
        let out = model.forward(&image_tensor(&image));
        let prompt = encode_prompt(&sparse, &m).unwrap();
        let aff = decode_affinity(Some(&prompt), &out.pyramid, &m).unwrap();
        assert_eq!(aff.shape(), (h, w));
        assert_eq!(aff.channels(), 49);
        assert!(aff.weights().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn three_by_three_stencil_gives_nine_channels() {
    let cfg = PromptConfig {
        stencil: 3,
        ..Default::default()
    };
    let m = PromptModule::new(cfg, &BackboneConfig::default(), 0).unwrap();
    assert_eq!(m.affinity_channels(), 9);
}

/// Ten Adam steps on the full training loss; returns the bias trajectory.
fn bias_run(seed: u64) -> (FoundationModel, FoundationModel, Vec<Vec<f32>>) {
    let bb = BackboneConfig::default();
    let initial = FoundationModel::new(bb, seed);
    let mut model = apply_bias_tuning(initial.clone()).unwrap();
    let m = PromptModule::new(PromptConfig::default(), &bb, seed + 1).unwrap();
    let (image, gt) = generate_scene(&SceneSpec::new(16, 16, 4, (1.0, 8.0), seed)).unwrap();
    let sparse = sample_random(&gt, 25, seed).unwrap();
    let mut adam = Adam::new(model.store(), AdamConfig::default());
    let mut trajectory = Vec::new();
    for _ in 0..10 {
        let g = sample_gradient(&image, &sparse, &gt, &model, &m, &PipelineConfig::default(), &LossConfig::default())
            .unwrap();
        adam.step(model.store_mut(), &g.foundation, 2e-3);
        trajectory.push(model.store().gather(|e| e.kind == ParamKind::Bias));
    }
    (initial, model, trajectory)
}

#[test]
fn bias_tuning_freezes_weights_bitwise() {
    let (initial, tuned, trajectory) = bias_run(9);
    let before = initial.store().gather(|e| e.kind == ParamKind::Weight);
    let after = tuned.store().gather(|e| e.kind == ParamKind::Weight);
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(trajectory[0], initial.store().gather(|e| e.kind == ParamKind::Bias));
    assert!(tuned.trainable_fraction() < 0.01);
}

#[test]
fn bias_trajectories_are_reproducible() {
    let (_, _, a) = bias_run(10);
    let (_, _, b) = bias_run(10);
    assert_eq!(a, b);
}

#[test]
fn bias_tuning_requires_biases() {
    let mut store = ParamStore::new();
    store.add("w", vec![4], ParamKind::Weight, vec![0.0; 4]);
    assert!(matches!(restrict_to_biases(&mut store), Err(NetError::Config(_))));
    store.add("b", vec![1], ParamKind::Bias, vec![0.0]);
    restrict_to_biases(&mut store).unwrap();
    assert_eq!(store.trainable_count(), 1);
}
