//! Gradient soundness against independent oracles: a six-nested-loop
//! convolution reference and central finite differences for every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvvc::tensor::chain::{Chain, Layer};
use mvvc::tensor::ops::{self, Padding};
use mvvc::tensor::optim::ParamSet;
use mvvc::tensor::{Scalar, Tensor};
use mvvc::testkit::{distinct_tensor, fd_tensor_gradient, random_tensor, rel_err};

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Direct six-nested-loop convolution, valid padding, needed as the trusted
/// reference for the production kernel.
fn conv3d_reference(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Tensor {
    let [d, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let [kd, kh, kw] = [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]];
    let cout = kernels.shape()[4];
    let od = d - kd + 1;
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut out = Tensor::zeros(&[od, oh, ow, cout]);
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for kz in 0..kd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for ci in 0..cin {
                                    let xi = input.data()
                                        [(((zo + kz) * h + yo + ky) * w + xo + kx) * cin + ci];
                                    let kv = kernels.data()
                                        [((((kz * kh) + ky) * kw + kx) * cin + ci) * cout + co];
                                    acc += xi * kv;
                                }
                            }
                        }
                    }
                    let o = ((zo * oh + yo) * ow + xo) * cout + co;
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_reference_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random_tensor(&[4, 5, 5, 2], -1.0, 1.0, &mut rng);
    let kernels = random_tensor(&[2, 3, 3, 2, 3], -1.0, 1.0, &mut rng);
    let bias = random_tensor(&[3], -0.5, 0.5, &mut rng);
    let fast = ops::conv3d(&input, &kernels, &bias, Padding::Valid).unwrap();
    let slow = conv3d_reference(&input, &kernels, &bias);
    assert_eq!(fast.shape(), slow.shape());
    for (a, b) in fast.data().iter().zip(slow.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv3d_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kernels = random_tensor(&[2, 2, 2, 2, 3], -1.0, 1.0, &mut rng);
    let bias = Tensor::zeros(&[3]);
    for _ in 0..5 {
        let x = random_tensor(&[3, 4, 4, 2], -1.0, 1.0, &mut rng);
        let y = random_tensor(&[3, 4, 4, 2], -1.0, 1.0, &mut rng);
        let (a, b): (Scalar, Scalar) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut combo = x.clone();
        combo.scale(a);
        combo.add_scaled(&y, b);
        let lhs = ops::conv3d(&combo, &kernels, &bias, Padding::Valid).unwrap();
        let mut rhs = ops::conv3d(&x, &kernels, &bias, Padding::Valid).unwrap();
        rhs.scale(a);
        rhs.add_scaled(&ops::conv3d(&y, &kernels, &bias, Padding::Valid).unwrap(), b);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10, "{l} vs {r}");
        }
    }
}

/// Scalar projection of a tensor-valued op so finite differences apply:
/// loss = sum(c .* op(x)) for fixed random coefficients c.
fn weighted_sum(out: &Tensor, coeffs: &[f64]) -> f64 {
    out.data().iter().zip(coeffs).map(|(&v, &c)| v as f64 * c).sum()
}

fn assert_grads_close(analytic: &[Scalar], numeric: &[f64], what: &str) {
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a as f64, n);
        assert!(e < FD_TOL, "{what}[{i}]: analytic {a} vs fd {n} (rel err {e:.2e})");
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let padding = if trial % 2 == 0 { Padding::Valid } else { Padding::Same };
        let cin = 1 + trial % 3;
        let cout = 1 + (trial / 2) % 3;
        let input = random_tensor(&[3, 4, 4, cin], -1.0, 1.0, &mut rng);
        let kernels = random_tensor(&[2, 3, 3, cin, cout], -1.0, 1.0, &mut rng);
        let bias = random_tensor(&[cout], -0.5, 0.5, &mut rng);
        let out = ops::conv3d(&input, &kernels, &bias, padding).unwrap();
        let coeffs: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = Tensor::from_vec(out.shape(), coeffs.iter().map(|&c| c as Scalar).collect());
        let (dx, dk, db) = ops::conv3d_backward(&input, &kernels, padding, &d_out);

        let k2 = kernels.clone();
        let b2 = bias.clone();
        let fd_x = fd_tensor_gradient(
            &|x| weighted_sum(&ops::conv3d(x, &k2, &b2, padding).unwrap(), &coeffs),
            &input,
            FD_EPS,
        );
        assert_grads_close(dx.data(), &fd_x, "conv d_input");

        let x2 = input.clone();
        let fd_k = fd_tensor_gradient(
            &|k| weighted_sum(&ops::conv3d(&x2, k, &b2, padding).unwrap(), &coeffs),
            &kernels,
            FD_EPS,
        );
        assert_grads_close(dk.data(), &fd_k, "conv d_kernels");

        let fd_b = fd_tensor_gradient(
            &|b| weighted_sum(&ops::conv3d(&x2, &k2, b, padding).unwrap(), &coeffs),
            &bias,
            FD_EPS,
        );
        assert_grads_close(db.data(), &fd_b, "conv d_bias");
    }
}

#[test]
fn relu_and_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..20 {
        // relu: keep activations away from the kink.
        let mut input = random_tensor(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
        for v in input.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let coeffs: Vec<f64> = (0..input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out =
            Tensor::from_vec(input.shape(), coeffs.iter().map(|&c| c as Scalar).collect());
        let dx = ops::relu_backward(&input, &d_out);
        let fd = fd_tensor_gradient(&|x| weighted_sum(&ops::relu(x), &coeffs), &input, FD_EPS);
        assert_grads_close(dx.data(), &fd, "relu d_input");

        // maxpool: distinct well-separated values keep the argmax stable.
        let input = distinct_tensor(&[4, 4, 2, 2], &mut rng);
        let window = [2, 2, 1];
        let (out, argmax) = ops::maxpool3d(&input, window).unwrap();
        let coeffs: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = Tensor::from_vec(out.shape(), coeffs.iter().map(|&c| c as Scalar).collect());
        let dx = ops::maxpool3d_backward(input.shape(), &argmax, &d_out);
        let fd = fd_tensor_gradient(
            &|x| weighted_sum(&ops::maxpool3d(x, window).unwrap().0, &coeffs),
            &input,
            FD_EPS,
        );
        assert_grads_close(dx.data(), &fd, "maxpool d_input");
    }
}

#[test]
fn dense_and_dropout_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..20 {
        let n_in = 3 + trial % 5;
        let n_out = 2 + trial % 3;
        let input = random_tensor(&[n_in], -1.0, 1.0, &mut rng);
        let weights = random_tensor(&[n_in, n_out], -1.0, 1.0, &mut rng);
        let bias = random_tensor(&[n_out], -0.5, 0.5, &mut rng);
        let coeffs: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = Tensor::from_vec(&[n_out], coeffs.iter().map(|&c| c as Scalar).collect());
        let (dx, dw, db) = ops::dense_backward(&input, &weights, &d_out);

        let w2 = weights.clone();
        let b2 = bias.clone();
        let fd_x = fd_tensor_gradient(
            &|x| weighted_sum(&ops::dense(x, &w2, &b2).unwrap(), &coeffs),
            &input,
            FD_EPS,
        );
        assert_grads_close(dx.data(), &fd_x, "dense d_input");
        let x2 = input.clone();
        let fd_w = fd_tensor_gradient(
            &|w| weighted_sum(&ops::dense(&x2, w, &b2).unwrap(), &coeffs),
            &weights,
            FD_EPS,
        );
        assert_grads_close(dw.data(), &fd_w, "dense d_weights");
        let fd_b = fd_tensor_gradient(
            &|b| weighted_sum(&ops::dense(&x2, &w2, b).unwrap(), &coeffs),
            &bias,
            FD_EPS,
        );
        assert_grads_close(db.data(), &fd_b, "dense d_bias");

        // dropout with a fixed seed is a deterministic function of x.
        let seed = 1000 + trial as u64;
        let input = random_tensor(&[11], -1.0, 1.0, &mut rng);
        let coeffs: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, mask) = ops::dropout(&input, 0.6, &mut ChaCha8Rng::seed_from_u64(seed));
        let d_out = Tensor::from_vec(&[11], coeffs.iter().map(|&c| c as Scalar).collect());
        let dx = ops::dropout_backward(&mask, &d_out);
        let fd = fd_tensor_gradient(
            &|x| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                weighted_sum(&ops::dropout(x, 0.6, &mut r).0, &coeffs)
            },
            &input,
            FD_EPS,
        );
        assert_grads_close(dx.data(), &fd, "dropout d_input");
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences_and_sums_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for trial in 0..20 {
        let classes = 2 + trial % 4;
        let logits = random_tensor(&[classes], -3.0, 3.0, &mut rng);
        let label = rng.gen_range(0..classes);
        let (_, grad) = ops::softmax_cross_entropy(&logits, label).unwrap();
        let sum: Scalar = grad.data().iter().sum();
        assert!(sum.abs() < 1e-12, "gradient sum {sum}");
        let fd = fd_tensor_gradient(
            &|l| ops::softmax_cross_entropy(l, label).unwrap().0 as f64,
            &logits,
            FD_EPS,
        );
        assert_grads_close(grad.data(), &fd, "cross_entropy d_logits");
    }
}

/// Independent high-precision route for the two-class loss:
/// loss = ln(1 + exp(-(x_label - x_other))) via ln_1p.
fn two_class_loss_oracle(x_label: f64, x_other: f64) -> f64 {
    let d = x_other - x_label;
    if d <= 0.0 {
        d.exp().ln_1p()
    } else {
        d + (-d).exp().ln_1p()
    }
}

#[test]
fn two_logit_loss_matches_high_precision_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..200 {
        let a = rng.gen_range(-30.0..30.0);
        let b = rng.gen_range(-30.0..30.0);
        let logits = Tensor::from_vec(&[2], vec![a as Scalar, b as Scalar]);
        let label = rng.gen_range(0..2usize);
        let (loss, grad) = ops::softmax_cross_entropy(&logits, label).unwrap();
        let expected = if label == 0 {
            two_class_loss_oracle(a, b)
        } else {
            two_class_loss_oracle(b, a)
        };
        assert!(
            rel_err(loss as f64, expected) < 1e-12,
            "loss {loss} vs oracle {expected}"
        );
        // p = sigmoid(x_other - x_label) is the magnitude of both grads.
        let p = 1.0 / (1.0 + (-(if label == 0 { b - a } else { a - b }) as f64).exp());
        assert!(rel_err(grad.data()[label].abs() as f64, p) < 1e-10);
    }
}

#[test]
fn dropout_expectation_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::from_vec(&[8], (1..=8).map(|v| v as Scalar * 0.3).collect());
    let keep = 0.7;
    let trials = 100_000;
    let mut sums = vec![0.0f64; x.len()];
    for _ in 0..trials {
        let (out, _) = ops::dropout(&x, keep, &mut rng);
        for (s, &v) in sums.iter_mut().zip(out.data()) {
            *s += v as f64;
        }
    }
    // Per element: mean of Bernoulli(keep) * x/keep has std x * sqrt((1-keep)/keep).
    for (i, (&xv, s)) in x.data().iter().zip(&sums).enumerate() {
        let mean = s / trials as f64;
        let se = (xv as f64).abs() * ((1.0 - keep) / keep).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - xv as f64).abs() < 3.0 * se,
            "element {i}: mean {mean} vs {xv} (3se {:.3e})",
            3.0 * se
        );
    }
}

#[test]
fn small_chain_gradients_match_finite_differences() {
    // conv -> relu -> pool -> flatten -> dense -> relu -> dropout -> dense
    // exercises every layer kind in one chain, dropout fixed by seed.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut params = ParamSet::new();
    params.insert("c1/k", random_tensor(&[2, 3, 3, 1, 4], -0.4, 0.4, &mut rng));
    params.insert("c1/b", Tensor::zeros(&[4]));
    params.insert("f1/w", random_tensor(&[2 * 2 * 2 * 4, 8], -0.4, 0.4, &mut rng));
    params.insert("f1/b", random_tensor(&[8], -0.1, 0.1, &mut rng));
    params.insert("f2/w", random_tensor(&[8, 2], -0.4, 0.4, &mut rng));
    params.insert("f2/b", Tensor::zeros(&[2]));
    let chain = Chain::new(vec![
        Layer::Conv3d { kernels: "c1/k".into(), bias: "c1/b".into(), padding: Padding::Valid },
        Layer::Relu,
        Layer::MaxPool3d { window: [2, 2, 2] },
        Layer::Flatten,
        Layer::Dense { weights: "f1/w".into(), bias: "f1/b".into() },
        Layer::Relu,
        Layer::Dropout { keep_prob: 0.8 },
        Layer::Dense { weights: "f2/w".into(), bias: "f2/b".into() },
    ]);
    let batch: Vec<(Tensor, usize)> = (0..3)
        .map(|i| (random_tensor(&[5, 6, 6, 1], -1.0, 1.0, &mut rng), i % 2))
        .collect();
    let report = mvvc::testkit::check_chain_gradients(
        &chain,
        &params,
        &batch,
        Some(4242),
        400,
        FD_EPS,
        &mut rng,
    );
    assert!(report.checked >= 200, "only {} probes", report.checked);
    assert!(
        report.max_rel_err < FD_TOL,
        "max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
