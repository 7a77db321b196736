use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Six nested loops, zero padding, no im2col.
fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &[f64]) -> Vec<f64> {
    let [b, ci, h, w] = input.shape().try_into().unwrap();
    let [co, _, kh, kw] = kernel.shape().try_into().unwrap();
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; b * co * h * w];
    for n in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - (kh / 2) as isize;
                                let sx = xx as isize + dx as isize - (kw / 2) as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += x[((n * ci + c) * h + sy as usize) * w + sx as usize]
                                    * k[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(rand_tensor(&[1, 1, 3, 3], &mut rng));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let k = g.constant(k);
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn pointwise_conv_is_scale_and_shift() {
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![0.5]));
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[2.5, 4.5, 6.5, 8.5]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = rand_tensor(&[2, 3, 5, 5], &mut rng);
    let kernel = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let bias = rand_tensor(&[4], &mut rng);
    let expect = conv_oracle(&input, &kernel, bias.data());
    let mut g = Graph::new(Mode::Training);
    let (x, k, b) = (g.constant(input), g.constant(kernel), g.constant(bias));
    let y = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 5]);
    for (a, e) in g.value(y).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None), Err(Error::Shape { .. })));
    let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, even, None).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let bad_bias = g.constant(Tensor::zeros(&[2]));
    assert!(g.conv2d(x, k, Some(bad_bias)).is_err());
}

#[test]
fn batch_norm_of_normalized_input_is_near_identity() {
    // Channel values {-1, 1} repeated: mean 0, variance 1.
    let data: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data.clone()).unwrap());
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm(x, gamma, beta, &RunningStats::new(2)).unwrap();
    let scale = 1.0 / (1.0 + BN_EPS).sqrt();
    for (a, e) in g.value(y).data().iter().zip(&data) {
        assert!((a - e * scale).abs() < 1e-15);
        assert!((a - e).abs() < 1e-5);
    }
    assert!(stats.is_some());
}

#[test]
fn batch_norm_with_zero_scale_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(rand_tensor(&[3, 2, 2, 2], &mut rng));
    let gamma = g.constant(Tensor::zeros(&[2]));
    let beta = g.constant(Tensor::from_vec(vec![0.25, -4.0]));
    let (y, _) = g.batch_norm(x, gamma, beta, &RunningStats::new(2)).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let ch = (i / 4) % 2;
        assert_eq!(*v, [0.25, -4.0][ch]);
    }
}

#[test]
fn batch_norm_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new(Mode::Training);
    // variance ~33, so the eps shrink v/(v+eps) stays below 1e-6
    let x = g.constant(Tensor::uniform(&[4, 2, 3, 3], 10.0, &mut rng));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, _) = g.batch_norm(x, gamma, beta, &RunningStats::new(2)).unwrap();
    let out = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| out[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_degenerate_batch() {
    let mut g = Graph::new(Mode::Training);
    let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        g.batch_norm(x, gamma, beta, &RunningStats::new(1)),
        Err(Error::DegenerateBatch { count: 1 })
    ));
    let mut inf = Graph::new(Mode::Inference);
    let x = inf.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let gamma = inf.constant(Tensor::ones(&[1]));
    let beta = inf.constant(Tensor::zeros(&[1]));
    let running = RunningStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let (y, stats) = inf.batch_norm(x, gamma, beta, &running).unwrap();
    assert!(stats.is_none());
    assert!((inf.value(y).item() - 2.0 / (4.0 + BN_EPS).sqrt()).abs() < 1e-15);
}

#[test]
fn running_stats_use_momentum() {
    let mut r = RunningStats::new(1);
    r.update(&BatchStats {
        mean: vec![2.0],
        var: vec![3.0],
    });
    assert!((r.mean[0] - 0.2).abs() < 1e-15);
    assert!((r.var[0] - (0.9 + 0.3)).abs() < 1e-15);
}

#[test]
fn relu_examples() {
    let mut g = Graph::new(Mode::Training);
    let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    // subgradient at exactly zero is zero
    let zero = g.constant(Tensor::zeros(&[3]));
    let loss = g.mse(y, zero).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 4.0]);

    let mut g = Graph::new(Mode::Training);
    let x = g.param(Tensor::full(&[4], -0.5));
    let y = g.relu(x).unwrap();
    let zero = g.constant(Tensor::full(&[4], 1.0));
    let loss = g.mse(y, zero).unwrap();
    g.backward(loss).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn matvec_examples() {
    let mut g = Graph::new(Mode::Training);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let y = g.matvec(&eye, x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

    let a = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0]).unwrap();
    let x = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.matvec(&a, x).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 8.0, 7.0]);

    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(g.matvec(&a, bad).is_err());
}

#[test]
fn normal_operator_matches_explicit_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[7, 5], &mut rng);
    let x = rand_tensor(&[5], &mut rng);
    // explicit A^T A, then times x
    let mut ata = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            ata[i][j] = (0..7).map(|r| a.data()[r * 5 + i] * a.data()[r * 5 + j]).sum();
        }
    }
    let expect: Vec<f64> = (0..5).map(|i| (0..5).map(|j| ata[i][j] * x.data()[j]).sum()).collect();

    let mut g = Graph::new(Mode::Training);
    let xv = g.constant(x);
    let ax = g.matvec(&a, xv).unwrap();
    let atax = g.matvec_t(&a, ax).unwrap();
    for (v, e) in g.value(atax).data().iter().zip(&expect) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new(Mode::Training);
    let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let z = g.constant(Tensor::zeros(&[2]));
    let l = g.mse(a, a).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let l = g.mse(a, z).unwrap();
    assert_eq!(g.value(l).item(), 5.0);

    let p = rand_tensor(&[40], &mut rng);
    let q = rand_tensor(&[40], &mut rng);
    let mut expect = 0.0;
    for i in 0..40 {
        let d = p.data()[i] - q.data()[i];
        expect += d * d;
    }
    let (p, q) = (g.constant(p), g.constant(q));
    let l = g.mse(p, q).unwrap();
    assert!((g.value(l).item() - expect).abs() < 1e-12);
    let short = g.constant(Tensor::zeros(&[3]));
    assert!(g.mse(p, short).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new(Mode::Training);
    let x = g.param(Tensor::from_vec(vec![3.0]));
    let unused = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let z = g.constant(Tensor::zeros(&[1]));
    let loss = g.mse(x, z).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    assert!(g.grad(unused).is_none());
    assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0]);

    // repeated calls accumulate
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(unused), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new(Mode::Training);
    let x = g.param(Tensor::from_vec(vec![1e300]));
    assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { .. })));
}

#[test]
fn combine_and_row_scale_gradients() {
    let mut g = Graph::new(Mode::Training);
    let w = g.param(Tensor::from_vec(vec![0.5, -2.0]));
    let a = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let c = g.combine(&[Coef::Param(w, 0), Coef::Param(w, 1)], &[a, b]).unwrap();
    let c = g.row_scale(c, &[1.0, 3.0]).unwrap();
    assert_eq!(g.value(c).data(), &[0.5, -1.0, 4.5, 0.0]);
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let loss = g.mse(c, z).unwrap();
    g.backward(loss).unwrap();
    // d/da = 2 c * factor * w0
    assert_eq!(g.grad(a).unwrap().data(), &[0.5, -1.0, 13.5, 0.0]);
    let dw0 = 2.0 * (0.5 * 1.0 + -1.0 * 2.0 + 4.5 * 3.0 * 3.0 + 0.0);
    let dw1 = 2.0 * (-1.0 * 1.0 + 0.0 * 3.0 * 1.0);
    assert_eq!(g.grad(w).unwrap().data(), &[dw0, dw1]);
    assert!(g.combine(&[Coef::Const(1.0)], &[a, b]).is_err());
}

/// conv -> bn -> relu -> conv -> reshape -> linear -> mse, differentiated
/// with respect to every leaf it touches.
fn composite_loss(mode: Mode, leaves: &[Tensor], a: &Tensor, target: &Tensor) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let [x, k1, b1, gamma, beta, k2] = vars[..] else { unreachable!() };
    let h = g.conv2d(x, k1, Some(b1)).unwrap();
    let running = RunningStats {
        mean: vec![0.1, -0.2, 0.05],
        var: vec![1.5, 0.7, 1.1],
    };
    let (h, _) = g.batch_norm(h, gamma, beta, &running).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.conv2d(h, k2, None).unwrap();
    let batch = g.shape(h)[0];
    let h = g.reshape(h, &[batch, 16]).unwrap();
    let y = g.matvec(a, h).unwrap();
    let t = g.constant(target.clone());
    let loss = g.mse(y, t).unwrap();
    let loss = g.scale(loss, 0.5).unwrap();
    let value = g.value(loss).item();
    g.backward(loss).unwrap();
    (value, vars.iter().map(|v| g.grad_or_zeros(*v)).collect())
}

fn check_composite(seed: u64, mode: Mode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = vec![
        rand_tensor(&[2, 1, 4, 4], &mut rng),
        rand_tensor(&[3, 1, 3, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
        Tensor::uniform(&[3], 0.5, &mut rng),
        rand_tensor(&[3], &mut rng),
        rand_tensor(&[1, 3, 3, 3], &mut rng),
    ];
    let a = rand_tensor(&[6, 16], &mut rng);
    let target = rand_tensor(&[2, 6], &mut rng);
    let (_, grads) = composite_loss(mode, &leaves, &a, &target);
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let numeric = central_difference(
            |p| {
                let mut probe = leaves.clone();
                probe[i] = Tensor::new(leaf.shape().to_vec(), p.to_vec()).unwrap();
                composite_loss(mode, &probe, &a, &target).0
            },
            leaf.data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(grads[i].data(), &numeric, 1e-6));
    }
    worst
}

#[test]
fn composite_graph_passes_gradient_check() {
    assert!(check_composite(11, Mode::Training) < 1e-4);
    assert!(check_composite(12, Mode::Inference) < 1e-4);
}

#[test]
fn scaling_the_loss_scales_every_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0 = rand_tensor(&[1, 2, 3, 3], &mut rng);
    let k0 = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let grads_for = |alpha: f64| {
        let mut g = Graph::new(Mode::Training);
        let x = g.param(x0.clone());
        let k = g.param(k0.clone());
        let y = g.conv2d(x, k, None).unwrap();
        let y = g.relu(y).unwrap();
        let z = g.constant(Tensor::full(&[1, 2, 3, 3], 0.3));
        let loss = g.mse(y, z).unwrap();
        let loss = g.scale(loss, alpha).unwrap();
        g.backward(loss).unwrap();
        (g.grad_or_zeros(x), g.grad_or_zeros(k))
    };
    let (gx, gk) = grads_for(1.0);
    for alpha in [2.0, 0.25, 8.0] {
        let (sx, sk) = grads_for(alpha);
        for (a, b) in sx.data().iter().zip(gx.data()).chain(sk.data().iter().zip(gk.data())) {
            assert_eq!(*a, alpha * b);
        }
    }
    let (sx, _) = grads_for(0.37);
    for (a, b) in sx.data().iter().zip(gx.data()) {
        assert!((a - 0.37 * b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    assert_eq!(
        check_composite(21, Mode::Training).to_bits(),
        check_composite(21, Mode::Training).to_bits()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relu_split_identity(values in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
        let mut g = Graph::new(Mode::Training);
        let x = g.constant(Tensor::from_vec(values.clone()));
        let neg = g.scale(x, -1.0).unwrap();
        let p = g.relu(x).unwrap();
        let n = g.relu(neg).unwrap();
        let s = g.add(p, n).unwrap();
        for (v, orig) in g.value(s).data().iter().zip(&values) {
            prop_assert_eq!(*v, orig.abs());
        }
    }

    #[test]
    fn conv_matches_oracle_for_random_geometry(
        seed in any::<u64>(),
        b in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 1usize..7, w in 1usize..7, kh in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rand_tensor(&[b, ci, h, w], &mut rng);
        let kernel = rand_tensor(&[co, ci, kh, kh], &mut rng);
        let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = conv_oracle(&input, &kernel, &bias);
        let mut g = Graph::new(Mode::Training);
        let (x, k, bv) = (g.constant(input), g.constant(kernel), g.constant(Tensor::from_vec(bias)));
        let y = g.conv2d(x, k, Some(bv)).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }
}
