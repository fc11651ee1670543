use bline_models::nn::*;
use bline_models::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Direct same-padded convolution.
fn naive_conv(conv: &Conv, x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape;
    let [kd, kh, kw] = conv.kernel;
    let mut y = Tensor::zeros([conv.cout, d, h, w]);
    for o in 0..conv.cout {
        for z in 0..d {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = conv.bias[o] as f64;
                    for ci in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let iz = z as isize + a as isize - (kd / 2) as isize;
                                    let ir = r as isize + b as isize - (kh / 2) as isize;
                                    let ic = col as isize + e as isize - (kw / 2) as isize;
                                    if iz < 0 || ir < 0 || ic < 0 || iz >= d as isize || ir >= h as isize || ic >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ci * d + iz as usize) * h + ir as usize) * w + ic as usize;
                                    let wi = (((o * c + ci) * kd + a) * kh + b) * kw + e;
                                    acc += conv.weight[wi] as f64 * x.data[xi] as f64;
                                }
                            }
                        }
                    }
                    y.data[((o * d + z) * h + r) * w + col] = acc as f32;
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kernel in [[1, 3, 3], [3, 3, 3], [1, 1, 1], [3, 1, 5]] {
        let mut conv = Conv::new(2, 3, kernel, &mut rng);
        conv.bias = vec![0.1, -0.2, 0.3];
        let x = random_tensor([2, 4, 5, 7], &mut rng);
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-5, "{kernel:?}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_input_gradient_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = Conv::new(3, 2, [3, 3, 3], &mut rng);
    let x = random_tensor([3, 3, 6, 5], &mut rng);
    let (y, cols) = conv.forward_cached(&x);
    let r = random_tensor(y.shape, &mut rng);
    let dx = conv.backward(&cols, x.shape, &r, true).unwrap();
    // <conv(x) - b, r> = <x, conv^T r> since conv is linear apart from bias.
    let bias_term: f64 = r
        .data
        .chunks(y.spatial())
        .zip(&conv.bias)
        .map(|(ch, b)| ch.iter().map(|v| *v as f64).sum::<f64>() * *b as f64)
        .sum();
    let lhs = dot(&y.data, &r.data) - bias_term;
    let rhs = dot(&x.data, &dx.data);
    assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

fn check_adjoint(
    shape: [usize; 4],
    fwd: impl Fn(&Tensor) -> Tensor,
    bwd: impl Fn(&Tensor) -> Tensor,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(shape, &mut rng);
    let y = fwd(&x);
    let r = random_tensor(y.shape, &mut rng);
    let dx = bwd(&r);
    assert_eq!(dx.shape, x.shape);
    let (lhs, rhs) = (dot(&y.data, &r.data), dot(&x.data, &dx.data));
    assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn linear_resampling_ops_have_matching_adjoints() {
    let s = [2, 2, 8, 12];
    check_adjoint(s, |x| avg_pool(x, [1, 2, 2]), |r| avg_pool_backward(r, [1, 2, 2], s));
    check_adjoint(s, |x| avg_pool(x, [2, 4, 4]), |r| avg_pool_backward(r, [2, 4, 4], s));
    check_adjoint(s, nearest_up2, nearest_up2_backward);
    check_adjoint(s, bilinear_up2, bilinear_up2_backward);
    check_adjoint(
        s,
        |x| Tensor::from_vec([2, 1, 1, 1], global_avg_pool(x)),
        |r| global_avg_pool_backward(&r.data, s),
    );
}

#[test]
fn bilinear_up2_interpolates_with_half_pixel_centres() {
    let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 4.0, 8.0]);
    let y = bilinear_up2(&x);
    assert_eq!(y.shape, [1, 1, 2, 6]);
    assert_eq!(&y.data[..6], &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
    assert_eq!(&y.data[..6], &y.data[6..]);
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0]);
    let (y, arg) = max_pool(&x, [1, 2, 2]);
    assert_eq!(y.data, vec![5.0, 9.0]);
    let dx = max_pool_backward(&Tensor::from_vec(y.shape, vec![1.0, 2.0]), &arg, x.shape);
    assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
}

#[test]
fn concat_and_split_are_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_tensor([2, 1, 3, 4], &mut rng);
    let b = random_tensor([3, 1, 3, 4], &mut rng);
    let (a2, b2) = split_channels(&concat_channels(&a, &b), 2);
    assert_eq!((a, b), (a2, b2));
}

/// Compares accumulated parameter gradients of `L = <logits, r>` with finite
/// differences on a sample of parameters. Near a ReLU or max-pool kink only
/// one of the one-sided differences is meaningful, so the best of central,
/// forward and backward differences is used.
fn finite_difference_check(net: &mut dyn Network, input: &Tensor, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = net.forward(input);
    let r = random_tensor(probe.shape, &mut rng);
    net.zero_grad();
    net.forward_backward(input, &mut |_| -> Result<Tensor> { Ok(r.clone()) })
        .unwrap();
    let grads: Vec<Vec<f32>> = net.params_and_grads().into_iter().map(|(_, g)| g.to_vec()).collect();
    let loss = |net: &dyn Network| dot(&net.forward(input).data, &r.data);
    let eps = 1e-3f32;
    let mut checked = 0;
    let mut outliers = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        for _ in 0..8 {
            let i = rng.random_range(0..g.len());
            let orig = net.params_and_grads()[pi].0[i];
            let base = loss(net);
            net.params_and_grads()[pi].0[i] = orig + eps;
            let up = loss(net);
            net.params_and_grads()[pi].0[i] = orig - eps;
            let down = loss(net);
            net.params_and_grads()[pi].0[i] = orig;
            let e = eps as f64;
            let an = g[i] as f64;
            // f32 forward passes leave ~1e-3 absolute noise in the estimates.
            let err = [(up - down) / (2.0 * e), (up - base) / e, (base - down) / e]
                .into_iter()
                .map(|fd| (fd - an).abs() - 0.05 * fd.abs().max(an.abs()))
                .fold(f64::INFINITY, f64::min);
            if err > 5e-3 {
                outliers.push((pi, i, an));
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
    assert!(
        outliers.is_empty(),
        "{} of {checked} gradients off: {outliers:?}",
        outliers.len()
    );
}

#[test]
fn unet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = UNet::new(1, [2, 3, 4], 2, &mut rng);
    let x = random_tensor([1, 1, 16, 24], &mut rng);
    finite_difference_check(&mut net, &x, 6);
}

#[test]
fn frame_classifier_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = ClassifierNet::new(3, &[3, 4, 5], 2, [1, 3, 3], [1, 2, 2], &mut rng);
    let x = random_tensor([3, 1, 16, 20], &mut rng);
    finite_difference_check(&mut net, &x, 8);
}

#[test]
fn clip_classifier_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = ClassifierNet::new(1, &[2, 3, 4], 2, [3, 3, 3], [2, 2, 2], &mut rng);
    let x = random_tensor([1, 4, 16, 16], &mut rng);
    finite_difference_check(&mut net, &x, 10);
}


