use super::*;
use crate::error::TensorError;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller; keeps values away from exact zero for kink ops.
            let u1: f64 = rng.gen_range(1e-6..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if v.abs() < 0.05 {
                0.05 * v.signum() + v
            } else {
                v
            }
        })
        .collect();
    TensorData::new_unchecked(shape.to_vec(), data)
}

fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

/// Scalar test function: weighted sum of an op applied to a leaf built from x.
fn scalar_through(
    op: &dyn Fn(&Tensor) -> Tensor,
    shape: &[usize],
    x: &[f64],
    weights: &[f64],
) -> (Graph, Tensor, Tensor) {
    let g = Graph::new();
    let leaf = g
        .leaf(&TensorData::new_unchecked(shape.to_vec(), x.to_vec()), true)
        .unwrap();
    let y = op(&leaf);
    let w = Tensor::from_data(TensorData::new_unchecked(y.shape().to_vec(), weights.to_vec()));
    let out = y.mul(&w).unwrap().sum_all().unwrap();
    (g, leaf, out)
}

fn check_first_and_second_order(name: &str, shape: &[usize], op: impl Fn(&Tensor) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D + shape.iter().sum::<usize>() as u64);
    for trial in 0..5 {
        let x0 = randn(&mut rng, shape);
        let probe = op(&Tensor::from_data(x0.clone()));
        let wdata = randn(&mut rng, probe.shape());
        let w = wdata.values().to_vec();
        let mut eval = |x: &[f64]| -> f64 {
            let (_g, _leaf, out) = scalar_through(&op, shape, x, &w);
            out.item().unwrap()
        };
        // First order.
        let (_g, leaf, out) = scalar_through(&op, shape, x0.values(), &w);
        let ad = grad(&out, &[&leaf], false).unwrap();
        let fd = fd_grad(&mut eval, x0.values(), 1e-5);
        let e1 = rel_err(ad.grads[0].values(), &fd);
        assert!(e1 <= 1e-4, "{name} trial {trial}: first-order rel err {e1}");

        // Second order: Hessian-vector product against finite differences.
        let v = randn(&mut rng, shape);
        let hvp_ad = {
            let (_g, leaf, out) = scalar_through(&op, shape, x0.values(), &w);
            let g1 = grad(&out, &[&leaf], true).unwrap();
            let vt = Tensor::from_data(v.clone());
            let psi = g1.grads[0].mul(&vt).unwrap().sum_all().unwrap();
            grad(&psi, &[&leaf], false).unwrap().grads[0].to_data()
        };
        let h = 1e-5;
        let grad_at = |x: &[f64]| -> Vec<f64> {
            let (_g, leaf, out) = scalar_through(&op, shape, x, &w);
            grad(&out, &[&leaf], false).unwrap().grads[0].values().to_vec()
        };
        let xp: Vec<f64> = x0.values().iter().zip(v.values()).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x0.values().iter().zip(v.values()).map(|(a, b)| a - h * b).collect();
        let gp = grad_at(&xp);
        let gm = grad_at(&xm);
        let hvp_fd: Vec<f64> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * h)).collect();
        let hvp_norm: f64 = hvp_fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        if hvp_norm > 1e-7 {
            let e2 = rel_err(hvp_ad.values(), &hvp_fd);
            assert!(e2 <= 1e-3, "{name} trial {trial}: second-order rel err {e2}");
        } else {
            // Zero Hessian (linear op or relu): AD must agree it is zero.
            let ad_norm: f64 = hvp_ad.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(ad_norm < 1e-7, "{name}: expected zero HVP, got norm {ad_norm}");
        }
    }
}

#[test]
fn grad_of_square_and_second_derivative() {
    let g = Graph::new();
    let x = g.leaf(&TensorData::scalar(3.0), true).unwrap();
    let y = x.mul(&x).unwrap();
    let first = grad(&y, &[&x], true).unwrap();
    assert_eq!(first.grads[0].item().unwrap(), 6.0);
    let second = grad(&first.grads[0], &[&x], false).unwrap();
    assert_eq!(second.grads[0].item().unwrap(), 2.0);
}

#[test]
fn relu_values() {
    let t = Tensor::from_data(TensorData::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(t.relu().unwrap().values(), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_identity_passthrough() {
    let eye = Tensor::from_data(
        TensorData::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
    );
    let a = TensorData::new(vec![3, 3], vec![2., -1., 0.5, 3., 4., -2., 0., 1., 7.]).unwrap();
    let out = eye.matmul(&Tensor::from_data(a.clone())).unwrap();
    assert_eq!(out.values(), a.values());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check_first_and_second_order("mul_self", &[2, 3], |x| x.mul(x).unwrap());
    check_first_and_second_order("div", &[2, 3], |x| {
        let c = Tensor::from_data(TensorData::full(&[2, 3], 2.5));
        c.div(&x.mul(x).unwrap().add_scalar(1.0).unwrap()).unwrap()
    });
    check_first_and_second_order("sigmoid", &[4], |x| x.sigmoid().unwrap());
    check_first_and_second_order("tanh", &[4], |x| x.tanh().unwrap());
    check_first_and_second_order("exp", &[4], |x| x.exp().unwrap());
    check_first_and_second_order("sqrt_of_square", &[4], |x| {
        x.mul(x).unwrap().add_scalar(0.5).unwrap().sqrt().unwrap()
    });
    check_first_and_second_order("relu", &[6], |x| x.relu().unwrap());
    check_first_and_second_order("abs", &[6], |x| x.abs().unwrap());
}

#[test]
fn structural_ops_match_finite_differences() {
    check_first_and_second_order("matmul", &[3, 4], |x| {
        let w = Tensor::from_data(TensorData::new_unchecked(
            vec![4, 2],
            (0..8).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        x.matmul(&w).unwrap().sigmoid().unwrap()
    });
    check_first_and_second_order("softmax", &[2, 5], |x| x.softmax().unwrap());
    check_first_and_second_order("cross_entropy", &[3, 4], |x| {
        x.cross_entropy(&[1, 0, 3]).unwrap()
    });
    check_first_and_second_order("avg_pool", &[1, 2, 4, 4], |x| x.avg_pool2d(2).unwrap());
    check_first_and_second_order("batch_stats_var", &[2, 3, 2, 2], |x| {
        x.batch_stats_channels().unwrap().1
    });
    check_first_and_second_order("tv_pieces", &[1, 1, 4, 4], |x| {
        x.diff_rows()
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .add(&x.diff_cols().unwrap().abs().unwrap().sum_all().unwrap())
            .unwrap()
    });
}

#[test]
fn conv_kernel_gradient_matches_finite_differences() {
    // Gradient w.r.t. the kernel on a random 1x1x5x5 input, h = 1e-5.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[1, 1, 5, 5]);
    let w0 = randn(&mut rng, &[2, 1, 3, 3]);
    let weights = randn(&mut rng, &[1, 2, 5, 5]);
    let eval = |wv: &[f64]| -> f64 {
        let g = Graph::new();
        let xt = g.constant(&x).unwrap();
        let wt = g
            .leaf(&TensorData::new_unchecked(vec![2, 1, 3, 3], wv.to_vec()), true)
            .unwrap();
        let y = xt.conv2d(&wt, 1, 1).unwrap();
        y.mul(&Tensor::from_data(weights.clone()))
            .unwrap()
            .sum_all()
            .unwrap()
            .item()
            .unwrap()
    };
    let ad = {
        let g = Graph::new();
        let xt = g.constant(&x).unwrap();
        let wt = g.leaf(&w0, true).unwrap();
        let y = xt.conv2d(&wt, 1, 1).unwrap();
        let out = y
            .mul(&Tensor::from_data(weights.clone()))
            .unwrap()
            .sum_all()
            .unwrap();
        grad(&out, &[&wt], false).unwrap().grads[0].values().to_vec()
    };
    let mut f = |wv: &[f64]| eval(wv);
    let fd = fd_grad(&mut f, w0.values(), 1e-5);
    assert!(rel_err(&ad, &fd) <= 1e-4);
}

#[test]
fn conv_first_and_second_order() {
    check_first_and_second_order("conv2d_input", &[1, 2, 4, 4], |x| {
        let w = Tensor::from_data(TensorData::new_unchecked(
            vec![3, 2, 3, 3],
            (0..54).map(|i| (i as f64 * 0.23).cos() * 0.4).collect(),
        ));
        x.conv2d(&w, 1, 1).unwrap().sigmoid().unwrap()
    });
    check_first_and_second_order("conv2d_weight_nonlinear", &[2, 1, 3, 3], |w| {
        let x = Tensor::from_data(TensorData::new_unchecked(
            vec![1, 1, 4, 4],
            (0..16).map(|i| (i as f64 * 0.71).sin()).collect(),
        ));
        let w4 = w.reshape(&[2, 1, 3, 3]).unwrap();
        x.conv2d(&w4, 1, 0).unwrap().tanh().unwrap()
    });
}

#[test]
fn batchnorm_running_stats_mode() {
    let g = Graph::new();
    let x = g
        .leaf(&TensorData::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap(), true)
        .unwrap();
    let gamma = g
        .leaf(&TensorData::new(vec![2], vec![2.0, 0.5]).unwrap(), true)
        .unwrap();
    let beta = g
        .leaf(&TensorData::new(vec![2], vec![0.1, -0.1]).unwrap(), true)
        .unwrap();
    let mean = TensorData::new(vec![2], vec![1.0, 0.0]).unwrap();
    let var = TensorData::new(vec![2], vec![4.0, 1.0]).unwrap();
    let y = x.batchnorm(&gamma, &beta, &mean, &var, 0.0).unwrap();
    // channel 0: (x-1)/2*2 + 0.1 ; channel 1: x*0.5 - 0.1
    let want = [0.1, 2.1, -1.1, 1.9];
    for (a, b) in y.values().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = randn(&mut rng, &[4, 6]);
    let g = Graph::new();
    let z = g.leaf(&logits, true).unwrap();
    let loss = z.cross_entropy(&[0, 5, 2, 2]).unwrap();
    let dz = grad(&loss, &[&z], false).unwrap();
    for row in 0..4 {
        let s: f64 = dz.grads[0].values()[row * 6..(row + 1) * 6].iter().sum();
        assert!(s.abs() < 1e-12, "row {row} grad sum {s}");
    }
}

#[test]
fn gaussian_sample_matches_reparameterization() {
    let mu = Tensor::from_data(TensorData::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sigma = Tensor::from_data(TensorData::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let eps = Tensor::from_data(TensorData::new(vec![3], vec![1.0, 0.0, -2.0]).unwrap());
    let z = gaussian_sample(&mu, &sigma, &eps).unwrap();
    for (got, want) in z.values().iter().zip([1.1, -2.0, -0.1]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn unreachable_target_returns_zero_with_flag() {
    let g = Graph::new();
    let x = g.leaf(&TensorData::scalar(2.0), true).unwrap();
    let unused = g.leaf(&TensorData::new(vec![2], vec![1.0, 1.0]).unwrap(), true).unwrap();
    let y = x.mul(&x).unwrap();
    let out = grad(&y, &[&x, &unused], false).unwrap();
    assert_eq!(out.grads[0].item().unwrap(), 4.0);
    assert_eq!(out.grads[1].values(), &[0.0, 0.0]);
    assert_eq!(out.unreachable, vec![false, true]);
}

#[test]
fn non_grad_target_is_an_error() {
    let g = Graph::new();
    let x = g.leaf(&TensorData::scalar(2.0), false).unwrap();
    let c = g.leaf(&TensorData::scalar(1.0), true).unwrap();
    let y = x.add(&c).unwrap();
    assert!(matches!(
        grad(&y, &[&x], false),
        Err(TensorError::RequiresGradMissing)
    ));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[3, 3]);
    match a.add(&b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn non_finite_output_is_a_numeric_fault() {
    let t = Tensor::from_data(TensorData::new(vec![1], vec![-1.0]).unwrap());
    assert!(matches!(
        t.log(),
        Err(TensorError::NumericFault { op: "log" })
    ));
    let z = Tensor::from_data(TensorData::new(vec![1], vec![0.0]).unwrap());
    assert!(matches!(
        Tensor::scalar(1.0).div(&z),
        Err(TensorError::NumericFault { op: "div" })
    ));
}

#[test]
fn stale_tensor_rejected_after_reset() {
    let g = Graph::new();
    let x = g.leaf(&TensorData::scalar(1.0), true).unwrap();
    g.reset();
    assert!(matches!(
        x.add(&x),
        Err(TensorError::StaleTensor { op: "add" })
    ));
}

#[test]
fn graphs_do_not_mix() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.leaf(&TensorData::scalar(1.0), true).unwrap();
    let b = g2.leaf(&TensorData::scalar(1.0), true).unwrap();
    assert!(matches!(
        a.add(&b),
        Err(TensorError::GraphMismatch { op: "add" })
    ));
}

#[test]
fn op_sequence_is_bit_deterministic() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let w = randn(&mut rng, &[2, 3, 3, 3]);
        let g = Graph::new();
        let xt = g.leaf(&x, true).unwrap();
        let wt = g.leaf(&w, true).unwrap();
        let y = xt.conv2d(&wt, 1, 1).unwrap().relu().unwrap();
        let loss = y.mul(&y).unwrap().sum_all().unwrap();
        let gr = grad(&loss, &[&xt, &wt], false).unwrap();
        let mut out = gr.grads[0].values().to_vec();
        out.extend_from_slice(gr.grads[1].values());
        out
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// End-to-end double backprop: gradient of a gradient-matching loss w.r.t.
/// the input, checked against finite differences on a tiny two-layer MLP.
#[test]
fn grad_of_gradient_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w1 = randn(&mut rng, &[6, 4]);
    let w2 = randn(&mut rng, &[3, 6]);
    let target_x = randn(&mut rng, &[1, 4]);
    let labels = [1usize];

    // Reference client gradients at target_x.
    let client_grads: Vec<TensorData> = {
        let g = Graph::new();
        let xt = g.constant(&target_x).unwrap();
        let w1t = g.leaf(&w1, true).unwrap();
        let w2t = g.leaf(&w2, true).unwrap();
        let h = xt.matmul(&w1t.transpose().unwrap()).unwrap().sigmoid().unwrap();
        let logits = h.matmul(&w2t.transpose().unwrap()).unwrap();
        let loss = logits.cross_entropy(&labels).unwrap();
        grad(&loss, &[&w1t, &w2t], false)
            .unwrap()
            .grads
            .iter()
            .map(|t| t.to_data())
            .collect()
    };

    let objective = |xv: &[f64]| -> (f64, Option<Vec<f64>>) {
        let g = Graph::new();
        let xt = g
            .leaf(&TensorData::new_unchecked(vec![1, 4], xv.to_vec()), true)
            .unwrap();
        let w1t = g.leaf(&w1, true).unwrap();
        let w2t = g.leaf(&w2, true).unwrap();
        let h = xt.matmul(&w1t.transpose().unwrap()).unwrap().sigmoid().unwrap();
        let logits = h.matmul(&w2t.transpose().unwrap()).unwrap();
        let loss = logits.cross_entropy(&labels).unwrap();
        let gw = grad(&loss, &[&w1t, &w2t], true).unwrap();
        let mut dist = Tensor::scalar(0.0);
        for (gt, target) in gw.grads.iter().zip(&client_grads) {
            let diff = gt.sub(&Tensor::from_data(target.clone())).unwrap();
            dist = dist.add(&diff.mul(&diff).unwrap().sum_all().unwrap()).unwrap();
        }
        let dx = grad(&dist, &[&xt], false).unwrap();
        (dist.item().unwrap(), Some(dx.grads[0].values().to_vec()))
    };

    let x0 = randn(&mut rng, &[1, 4]);
    let (_, ad) = objective(x0.values());
    let mut f = |xv: &[f64]| objective(xv).0;
    let fd = fd_grad(&mut f, x0.values(), 1e-5);
    assert!(rel_err(&ad.unwrap(), &fd) <= 1e-3);
}
