use super::*;
use crate::datasets::{synthetic_dataset, ImageBatch};
use crate::fedsim::{client_step, IdentityDefense, Observation};
use crate::models::{LeNetArch, MlpArch, Model, ModelArch};

fn tiny_lenet(seed: u64, batchnorm: bool) -> Model {
    Model::init(
        ModelConfig::new(ModelArch::LeNet(LeNetArch {
            input: (3, 8, 8),
            num_classes: 4,
            conv1: 4,
            conv2: 6,
            kernel: 3,
            hidden: 24,
            batchnorm,
        })),
        seed,
    )
    .unwrap()
}

fn observe(model: &Model, batch: &ImageBatch, t: u64) -> Arc<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = client_step(model, batch, &mut IdentityDefense, &mut rng).unwrap();
    Arc::new(Observation {
        t,
        params: model.params.clone(),
        grads: out.defended_grads,
        bn_stats: model.bn_stats.clone(),
        batch_id: batch.batch_id(),
        batch_size: batch.len(),
    })
}

#[test]
fn presets_match_reference_table() {
    let dlg = preset("dlg").unwrap();
    assert_eq!(dlg.alpha_tv, 0.0);
    assert_eq!(dlg.alpha_l2, 0.0);
    assert_eq!(dlg.alpha_bn, 0.0);
    assert_eq!(dlg.alpha_group, 0.0);
    assert_eq!(dlg.optimizer, OptimizerKind::Lbfgs);
    assert_eq!(dlg.distance, Distance::L2);

    let ig = preset("inverting_gradients").unwrap();
    assert_eq!(ig.alpha_tv, 0.08);
    assert_eq!(ig.optimizer, OptimizerKind::Adam);
    assert_eq!(ig.distance, Distance::Cosine);
    assert_eq!(ig.alpha_scaling, AlphaScaling::FOverB);
    // CIFAR-size image, batch 8: alpha_tv scales to 0.08 * 1 / 8.
    let scaled = ig.scaled_alphas((3, 32, 32), 8);
    assert!((scaled.tv - 0.01).abs() < 1e-15);

    let gi = preset("gradinversion").unwrap();
    assert_eq!(gi.alpha_tv, 0.08);
    assert_eq!(gi.alpha_l2, 0.0008);
    assert_eq!(gi.alpha_bn, 0.0001);
    assert_eq!(gi.alpha_group, 0.0001);
    assert_eq!(gi.seeds, 6);
    assert_eq!(gi.seed_selection, SeedSelection::Consensus);
    assert_eq!(gi.optimizer, OptimizerKind::Lbfgs);
    assert_eq!(gi.distance, Distance::L2);

    let mu = preset("multiple_updates").unwrap();
    assert_eq!(mu.alpha_tv, 0.08);
    assert_eq!(mu.alpha_scaling, AlphaScaling::OverB);
    assert_eq!(mu.seeds, 2);
    assert!(mu.multi_observation);
    assert_eq!(mu.seed_selection, SeedSelection::BestOf);
    // No F factor: scaling is 1/B regardless of image size.
    let scaled = mu.scaled_alphas((3, 64, 64), 4);
    assert!((scaled.tv - 0.02).abs() < 1e-15);

    assert!(preset("nonsense").is_err());
}

#[test]
fn gradient_distance_trivial_cases() {
    let g = Graph::new();
    let vals = TensorData::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let dummy = vec![g.leaf(&vals, true).unwrap()];
    // Identical sets: zero under both distances.
    let l2 = gradient_distance(&dummy, &[vals.clone()], Distance::L2, false).unwrap();
    assert_eq!(l2.value.item().unwrap(), 0.0);
    let cos = gradient_distance(&dummy, &[vals.clone()], Distance::Cosine, false).unwrap();
    assert!(cos.value.item().unwrap().abs() < 1e-12);

    // Cosine scale invariance: g vs 2g.
    let doubled = TensorData::new(vec![3], vec![2.0, -4.0, 1.0]).unwrap();
    let cos2 = gradient_distance(&dummy, &[doubled], Distance::Cosine, false).unwrap();
    assert!(cos2.value.item().unwrap().abs() < 1e-12);

    // L2 single-coordinate perturbation: distance is eps^2.
    let eps = 1e-3;
    let bumped = TensorData::new(vec![3], vec![1.0 + eps, -2.0, 0.5]).unwrap();
    let l2b = gradient_distance(&dummy, &[bumped], Distance::L2, false).unwrap();
    assert!((l2b.value.item().unwrap() - eps * eps).abs() < 1e-15);

    // Zero-norm target under cosine: defined as distance 1, flagged.
    let zero = TensorData::zeros(&[3]);
    let degen = gradient_distance(&dummy, &[zero], Distance::Cosine, false).unwrap();
    assert_eq!(degen.value.item().unwrap(), 1.0);
    assert!(degen.degenerate_target);
}

#[test]
fn regularization_trivial_cases() {
    let stats = BnStats::default();
    // Constant image: TV term is zero.
    let flat = Tensor::from_data(TensorData::full(&[1, 3, 6, 6], 0.7));
    let tv_only = ScaledAlphas {
        tv: 1.0,
        l2: 0.0,
        bn: 0.0,
        group: 0.0,
    };
    let r = total_regularization(&flat, &tv_only, &[], &stats, None)
        .unwrap()
        .unwrap();
    assert_eq!(r.item().unwrap(), 0.0);

    // Zero image: l2 term is zero.
    let zero = Tensor::from_data(TensorData::zeros(&[1, 3, 6, 6]));
    let l2_only = ScaledAlphas {
        tv: 0.0,
        l2: 1.0,
        bn: 0.0,
        group: 0.0,
    };
    let r = total_regularization(&zero, &l2_only, &[], &stats, None)
        .unwrap()
        .unwrap();
    assert_eq!(r.item().unwrap(), 0.0);

    // Image equal to the consensus: group term is zero.
    let img = TensorData::full(&[1, 3, 6, 6], 0.3);
    let group_only = ScaledAlphas {
        tv: 0.0,
        l2: 0.0,
        bn: 0.0,
        group: 1.0,
    };
    let r = total_regularization(
        &Tensor::from_data(img.clone()),
        &group_only,
        &[],
        &stats,
        Some(&img),
    )
    .unwrap()
    .unwrap();
    assert_eq!(r.item().unwrap(), 0.0);

    // All coefficients zero: nothing to add.
    let none = ScaledAlphas {
        tv: 0.0,
        l2: 0.0,
        bn: 0.0,
        group: 0.0,
    };
    assert!(total_regularization(&flat, &none, &[], &stats, None)
        .unwrap()
        .is_none());

    // BN coefficient without BN layers is a config error.
    let bn_only = ScaledAlphas {
        tv: 0.0,
        l2: 0.0,
        bn: 1.0,
        group: 0.0,
    };
    assert!(matches!(
        total_regularization(&flat, &bn_only, &[], &stats, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn label_recovery_single_sample_is_exact() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 5);
    for seed in 0..10u64 {
        let model = tiny_lenet(200 + seed, true);
        let idx = (seed % 16) as usize;
        let batch = ds.train.batch(&[idx]);
        let obs = observe(&model, &batch, 500);
        let rec = recover_labels(&obs, &model.config, seed).unwrap();
        assert_eq!(rec.labels, vec![batch.labels[0]], "seed {seed}");
        assert!(!rec.degenerate);
    }
}

#[test]
fn label_recovery_distinct_batch_is_exact() {
    // Batch of 4 distinct labels over 4 classes on an untrained net.
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 6);
    for seed in 0..10u64 {
        let model = tiny_lenet(300 + seed, true);
        let batch = ds.train.batch(&[0, 1, 2, 3]);
        let obs = observe(&model, &batch, 500);
        let rec = recover_labels(&obs, &model.config, seed).unwrap();
        let mut want = batch.labels.clone();
        want.sort_unstable();
        assert_eq!(rec.labels, want, "seed {seed}");
    }
}

#[test]
fn label_recovery_zero_gradients_falls_back_uniform() {
    let model = tiny_lenet(7, true);
    let grads: Vec<TensorData> = model
        .params
        .iter()
        .map(|p| TensorData::zeros(p.data.shape()))
        .collect();
    let obs = Observation {
        t: 500,
        params: model.params.clone(),
        grads,
        bn_stats: model.bn_stats.clone(),
        batch_id: 1,
        batch_size: 6,
    };
    let rec = recover_labels(&obs, &model.config, 1).unwrap();
    assert!(rec.degenerate);
    assert_eq!(rec.labels, vec![0, 1, 2, 3, 0, 1]);
}

#[test]
fn planted_truth_is_a_fixed_point() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 9);
    let model = tiny_lenet(900, true);
    let batch = ds.train.batch(&[0, 1]);
    let obs = observe(&model, &batch, 500);
    for distance in [Distance::L2, Distance::Cosine] {
        let mut cfg = preset("dlg").unwrap();
        cfg.distance = distance;
        cfg.attack_iterations = 5;
        cfg.rng_seed = 3;
        let out = run_attack_with_init(
            &[obs.clone()],
            &cfg,
            &model.config,
            Some(&batch.pixels),
            Some(&batch.labels),
        )
        .unwrap();
        assert!(
            out.final_loss.abs() <= 1e-10,
            "{distance:?}: loss {}",
            out.final_loss
        );
        // The optimizer must not move away from the planted truth.
        for (a, b) in out.images.values().iter().zip(batch.pixels.values()) {
            assert!((a - b).abs() <= 1e-8, "{distance:?}: drifted");
        }
    }
}

#[test]
fn objective_is_invariant_to_joint_batch_permutation() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 11);
    let model = tiny_lenet(901, true);
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    let obs = observe(&model, &batch, 500);
    let mut cfg = preset("dlg").unwrap();
    cfg.attack_iterations = 1;
    cfg.rng_seed = 5;

    let perm = [2usize, 0, 3, 1];
    let img = 3 * 8 * 8;
    let mut permuted_pixels = vec![0.0; batch.pixels.numel()];
    let mut permuted_labels = vec![0usize; 4];
    for (dst, &src) in perm.iter().enumerate() {
        permuted_pixels[dst * img..(dst + 1) * img]
            .copy_from_slice(&batch.pixels.values()[src * img..(src + 1) * img]);
        permuted_labels[dst] = batch.labels[src];
    }
    let permuted = TensorData::new_unchecked(vec![4, 3, 8, 8], permuted_pixels);

    let a = run_attack_with_init(
        &[obs.clone()],
        &cfg,
        &model.config,
        Some(&batch.pixels),
        Some(&batch.labels),
    )
    .unwrap();
    let b = run_attack_with_init(
        &[obs.clone()],
        &cfg,
        &model.config,
        Some(&permuted),
        Some(&permuted_labels),
    )
    .unwrap();
    assert!(
        (a.loss_trace[0][0] - b.loss_trace[0][0]).abs() <= 1e-12,
        "objective changed under permutation: {} vs {}",
        a.loss_trace[0][0],
        b.loss_trace[0][0]
    );
}

#[test]
fn dlg_recovers_a_single_image_through_a_small_mlp() {
    let ds = synthetic_dataset(4, 8, 0, (3, 8, 8), 13);
    let model = Model::init(
        ModelConfig::new(ModelArch::Mlp(MlpArch {
            input: (3, 8, 8),
            hidden: 32,
            num_classes: 4,
        })),
        77,
    )
    .unwrap();
    let batch = ds.train.batch(&[2]);
    let obs = observe(&model, &batch, 500);
    let mut cfg = preset("dlg").unwrap();
    cfg.attack_iterations = 200;
    cfg.rng_seed = 21;
    let out = run_attack(&[obs], &cfg, &model.config).unwrap();
    assert_eq!(out.labels, vec![batch.labels[0]]);
    let mse: f64 = out
        .images
        .values()
        .iter()
        .zip(batch.pixels.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / out.images.numel() as f64;
    assert!(mse <= 1e-3, "per-pixel mse {mse}");
}

#[test]
fn multi_observation_with_one_pair_equals_single_observation() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 17);
    let mut model = tiny_lenet(902, true);
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    // Three snapshots from a short training trajectory on the same batch.
    let mut observations = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [100u64, 200, 300] {
        let out = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();
        observations.push(Arc::new(Observation {
            t,
            params: model.params.clone(),
            grads: out.defended_grads.clone(),
            bn_stats: model.bn_stats.clone(),
            batch_id: batch.batch_id(),
            batch_size: batch.len(),
        }));
        model.update_bn_stats(&out.batch_stats).unwrap();
        model.params.sgd_step(&out.defended_grads, 0.01).unwrap();
    }
    let mut multi = preset("multiple_updates").unwrap();
    multi.max_pairs = 1;
    multi.attack_iterations = 6;
    multi.rng_seed = 4;
    let mut single = multi.clone();
    single.multi_observation = false;
    let a = run_attack(&observations, &multi, &model.config).unwrap();
    let b = run_attack(&observations, &single, &model.config).unwrap();
    assert_eq!(a.loss_trace.len(), b.loss_trace.len());
    for (ta, tb) in a.loss_trace.iter().zip(&b.loss_trace) {
        assert_eq!(ta.len(), tb.len());
        for (x, y) in ta.iter().zip(tb) {
            assert!(
                (x - y).abs() <= 1e-10,
                "iteration losses diverged: {x} vs {y}"
            );
        }
    }
}

#[test]
fn multi_observation_requires_shared_batch() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 19);
    let model = tiny_lenet(903, true);
    let obs1 = observe(&model, &ds.train.batch(&[0, 1]), 100);
    let obs2 = observe(&model, &ds.train.batch(&[2, 3]), 200);
    let cfg = preset("multiple_updates").unwrap();
    assert!(matches!(
        run_attack(&[obs1, obs2], &cfg, &model.config),
        Err(Error::Config(_))
    ));
}

#[test]
fn gradinversion_needs_batchnorm() {
    let ds = synthetic_dataset(4, 16, 0, (3, 8, 8), 23);
    let model = tiny_lenet(904, false);
    let obs = observe(&model, &ds.train.batch(&[0, 1]), 100);
    let cfg = preset("gradinversion").unwrap();
    assert!(matches!(
        run_attack(&[obs], &cfg, &model.config),
        Err(Error::Config(_))
    ));
}
