use super::*;
use crate::datasets::synthetic_dataset;
use crate::models::{LeNetArch, MlpArch, ModelArch, ModelConfig};

fn tiny_dataset() -> Dataset {
    synthetic_dataset(4, 32, 8, (3, 8, 8), 42)
}

fn tiny_model(seed: u64) -> Model {
    Model::init(
        ModelConfig::new(ModelArch::LeNet(LeNetArch {
            input: (3, 8, 8),
            num_classes: 4,
            conv1: 4,
            conv2: 6,
            kernel: 3,
            hidden: 16,
            batchnorm: true,
        })),
        seed,
    )
    .unwrap()
}

fn tiny_config(total: u64, rate: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        total_iterations: total,
        attack_rate: rate,
        batch_size: 4,
        repeated_batch: true,
        stratified: false,
        clients: 1,
        seed: 7,
        eval_interval: rate,
        heldout_eval: 8,
        capture_at_zero: false,
    }
}

#[test]
fn identity_defense_passes_gradients_through() {
    let ds = tiny_dataset();
    let model = tiny_model(1);
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();
    for (r, d) in out.raw_grads.iter().zip(&out.defended_grads) {
        assert_eq!(r.values(), d.values());
    }
}

#[test]
fn zero_model_loss_is_log_num_classes() {
    // Uniform logits over 10 classes -> mean CE is ln(10).
    let ds = synthetic_dataset(10, 20, 0, (3, 8, 8), 3);
    let mut model = Model::init(
        ModelConfig::new(ModelArch::Mlp(MlpArch {
            input: (3, 8, 8),
            hidden: 8,
            num_classes: 10,
        })),
        5,
    )
    .unwrap();
    // Step by the parameters themselves with lr 1 to zero every weight.
    let zero_grads: Vec<TensorData> = model.params.iter().map(|p| p.data.clone()).collect();
    model.params.sgd_step(&zero_grads, 1.0).unwrap();
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();
    assert!((out.loss - 10.0f64.ln()).abs() < 1e-12);
}

#[test]
fn client_gradient_matches_finite_differences() {
    let ds = tiny_dataset();
    let model = tiny_model(9);
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();

    // Check the fc2 weight gradient against central differences.
    let idx = model.params.final_fc_index().unwrap();
    let w0 = model.params.get(idx).data.clone();
    let loss_at = |wv: &[f64]| -> f64 {
        let mut m = model.clone();
        let grads: Vec<TensorData> = m
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == idx {
                    let delta: Vec<f64> = p
                        .data
                        .values()
                        .iter()
                        .zip(wv)
                        .map(|(old, new)| old - new)
                        .collect();
                    TensorData::new_unchecked(p.data.shape().to_vec(), delta)
                } else {
                    TensorData::zeros(p.data.shape())
                }
            })
            .collect();
        m.params.sgd_step(&grads, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        client_step(&m, &batch, &mut IdentityDefense, &mut rng)
            .unwrap()
            .loss
    };
    let h = 1e-5;
    let mut rel_num = 0.0;
    let mut rel_den = 0.0;
    for i in 0..w0.numel() {
        let mut wp = w0.values().to_vec();
        wp[i] += h;
        let mut wm = w0.values().to_vec();
        wm[i] -= h;
        let fd = (loss_at(&wp) - loss_at(&wm)) / (2.0 * h);
        let ad = out.raw_grads[idx].values()[i];
        rel_num += (ad - fd) * (ad - fd);
        rel_den += fd * fd;
    }
    assert!(rel_num.sqrt() / rel_den.sqrt().max(1e-8) <= 1e-4);
}

#[test]
fn server_update_subtracts_single_client_gradient() {
    let model = tiny_model(11);
    let mut params = model.params.clone();
    let grads: Vec<TensorData> = params
        .iter()
        .map(|p| TensorData::full(p.data.shape(), 0.25))
        .collect();
    server_aggregate_and_update(&mut params, &[grads.clone()], 1.0).unwrap();
    for (after, before) in params.iter().zip(model.params.iter()) {
        for (a, b) in after.data.values().iter().zip(before.data.values()) {
            assert!((b - a - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn opposite_client_gradients_cancel() {
    let model = tiny_model(13);
    let mut params = model.params.clone();
    let g: Vec<TensorData> = params
        .iter()
        .map(|p| TensorData::full(p.data.shape(), 0.5))
        .collect();
    let neg: Vec<TensorData> = g
        .iter()
        .map(|t| {
            TensorData::new_unchecked(
                t.shape().to_vec(),
                t.values().iter().map(|v| -v).collect(),
            )
        })
        .collect();
    server_aggregate_and_update(&mut params, &[g, neg], 1.0).unwrap();
    for (after, before) in params.iter().zip(model.params.iter()) {
        assert_eq!(after.data.values(), before.data.values());
    }
}

#[test]
fn aggregation_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = tiny_model(17);
    let sets: Vec<Vec<TensorData>> = (0..3)
        .map(|_| {
            model
                .params
                .iter()
                .map(|p| {
                    let data: Vec<f64> = (0..p.data.numel())
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect();
                    TensorData::new_unchecked(p.data.shape().to_vec(), data)
                })
                .collect()
        })
        .collect();
    let mean = aggregate_mean(&sets).unwrap();
    for i in 0..mean.len() {
        for j in 0..mean[i].numel() {
            let oracle =
                (sets[0][i].values()[j] + sets[1][i].values()[j] + sets[2][i].values()[j]) / 3.0;
            assert!((mean[i].values()[j] - oracle).abs() < 1e-15);
        }
    }
}

#[test]
fn misaligned_sets_are_a_structural_error() {
    let model = tiny_model(19);
    let good: Vec<TensorData> = model
        .params
        .iter()
        .map(|p| TensorData::zeros(p.data.shape()))
        .collect();
    let mut bad = good.clone();
    bad.pop();
    let mut params = model.params.clone();
    assert!(matches!(
        server_aggregate_and_update(&mut params, &[good, bad], 0.1),
        Err(Error::Structure(_))
    ));
}

#[test]
fn observation_count_matches_attack_rate() {
    let ds = tiny_dataset();
    let model = tiny_model(23);
    let cfg = tiny_config(1000, 500);
    let mut seen = Vec::new();
    let out = run_training(model, &ds, &cfg, &mut IdentityDefense, &mut |obs, _truth| {
        seen.push(obs.t);
        Ok(())
    })
    .unwrap();
    assert!(out.halted.is_none());
    assert_eq!(seen, vec![500, 1000]);
    assert_eq!(out.observations.len(), 2);
    // Repeated batches mean every capture shares one batch id.
    assert_eq!(out.observations[0].batch_id, out.observations[1].batch_id);
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let ds = tiny_dataset();
    let model = tiny_model(29);
    let before: Vec<Vec<u64>> = model
        .params
        .iter()
        .map(|p| p.data.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut cfg = tiny_config(100, 50);
    cfg.lr = 0.0;
    let out = run_training(model, &ds, &cfg, &mut IdentityDefense, &mut |_, _| Ok(())).unwrap();
    for (p, bits) in out.model.params.iter().zip(&before) {
        let now: Vec<u64> = p.data.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&now, bits);
    }
}

#[test]
fn training_is_bit_reproducible_with_fixed_seed() {
    let run = || {
        let ds = tiny_dataset();
        let model = tiny_model(31);
        let cfg = tiny_config(60, 30);
        let out = run_training(model, &ds, &cfg, &mut IdentityDefense, &mut |_, _| Ok(())).unwrap();
        let bits: Vec<u64> = out
            .model
            .params
            .iter()
            .flat_map(|p| p.data.values().iter().map(|v| v.to_bits()))
            .collect();
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn snapshots_survive_later_training() {
    let ds = tiny_dataset();
    let model = tiny_model(37);
    let cfg = tiny_config(100, 20);
    let mut checksums: Vec<(u64, f64)> = Vec::new();
    let out = run_training(model, &ds, &cfg, &mut IdentityDefense, &mut |obs, _truth| {
        let sum: f64 = obs
            .params
            .iter()
            .flat_map(|p| p.data.values().iter())
            .sum();
        checksums.push((obs.t, sum));
        Ok(())
    })
    .unwrap();
    for ((t, sum), obs) in checksums.iter().zip(&out.observations) {
        assert_eq!(*t, obs.t);
        let now: f64 = obs
            .params
            .iter()
            .flat_map(|p| p.data.values().iter())
            .sum();
        assert_eq!(*sum, now, "snapshot t={t} mutated after capture");
    }
}

#[test]
fn server_uses_exactly_the_defended_values() {
    // A defense that doubles gradients: the resulting update must equal a
    // manual step with doubled gradients, proving the wire value is used.
    struct Doubler;
    impl GradientDefense for Doubler {
        fn apply(&mut self, ctx: DefenseContext<'_>) -> Result<Vec<TensorData>> {
            Ok(ctx
                .raw_grads
                .iter()
                .map(|g| {
                    TensorData::new_unchecked(
                        g.shape().to_vec(),
                        g.values().iter().map(|v| 2.0 * v).collect(),
                    )
                })
                .collect())
        }
    }
    let ds = tiny_dataset();
    let model = tiny_model(41);
    let batch = ds.train.batch(&[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();
    let mut rng2 = ChaCha8Rng::seed_from_u64(5);
    let doubled = client_step(&model, &batch, &mut Doubler, &mut rng2).unwrap();
    for (r, d) in raw.raw_grads.iter().zip(&doubled.defended_grads) {
        for (a, b) in r.values().iter().zip(d.values()) {
            assert!((2.0 * a - b).abs() < 1e-15);
            if *a != 0.0 {
                assert_ne!(*a, *b);
            }
        }
    }
}

#[test]
fn config_validation_rejects_bad_rates() {
    let mut cfg = tiny_config(1000, 300);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.attack_rate = 500;
    assert!(cfg.validate().is_ok());
}
