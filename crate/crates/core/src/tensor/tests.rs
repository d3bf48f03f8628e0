use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct sliding-window convolution with zero padding.
fn conv_oracle(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c_in, h, w) = input.dims4().unwrap();
    let (c_out, _, k, _) = weight.dims4().unwrap();
    let pad = (k as isize - 1) / 2;
    let mut out = vec![0.0; n * c_out * h * w];
    for b in 0..n {
        for co in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let iv = input.data()[((b * c_in + ci) * h + sy as usize) * w + sx as usize];
                                let wv = weight.data()[((co * c_in + ci) * k + ky as usize) * k + kx as usize];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((b * c_out + co) * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, h, w], out).unwrap()
}

fn run_conv(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (i, w, b) = (tape.constant(input), tape.constant(weight), tape.constant(bias));
    let out = tape.conv2d(i, w, b).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let input = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let out = run_conv(input.clone(), Tensor::new(vec![1, 1, 3, 3], k).unwrap(), Tensor::zeros(&[1]));
    assert_eq!(out, input);
}

#[test]
fn conv_constant_input_interior_and_corner() {
    let input = Tensor::full(&[1, 1, 5, 5], 2.0);
    let out = run_conv(input, Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]));
    assert_eq!(out.data()[2 * 5 + 2], 18.0);
    assert_eq!(out.data()[0], 8.0);
}

#[test]
fn conv_zero_weight_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_tensor(&[2, 3, 4, 4], &mut rng);
    let out = run_conv(input, Tensor::zeros(&[2, 3, 3, 3]), Tensor::from_vec(vec![0.7, -1.5]));
    for (i, v) in out.data().iter().enumerate() {
        let co = (i / 16) % 2;
        assert_eq!(*v, [0.7, -1.5][co]);
    }
}

#[test]
fn conv_matches_quadruple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in [1, 3, 5] {
        let input = random_tensor(&[1, 2, 5, 5], &mut rng);
        let weight = random_tensor(&[3, 2, k, k], &mut rng);
        let bias = random_tensor(&[3], &mut rng);
        let got = run_conv(input.clone(), weight.clone(), bias.clone());
        let want = conv_oracle(&input, &weight, &bias);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(i, w, b), Err(Error::Shape(_))));
}

#[test]
fn rbf_and_relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![0.0, 1.5, 0.0, -3.0]).unwrap());
    let sigma = tape.constant(Tensor::from_vec(vec![1.5, 0.4]));
    let y = tape.activation(x, Activation::Rbf, Some(sigma)).unwrap();
    let v = tape.value(y).data().to_vec();
    assert_eq!(v[0], 1.0);
    assert!((v[1] - (-1.0f64).exp()).abs() < 1e-15);
    assert!((v[1] - 0.367879).abs() < 1e-6);
    assert_eq!(v[2], 1.0);

    let r = tape.activation(x, Activation::Relu, None).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 1.5, 0.0, 0.0]);
    let x2 = tape.constant(Tensor::from_vec(vec![-3.0, 3.0]).reshape(&[1, 1, 1, 2]).unwrap());
    let r2 = tape.relu(x2);
    assert_eq!(tape.value(r2).data(), &[0.0, 3.0]);
}

#[test]
fn rbf_rejects_sigma_length_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let sigma = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
    assert!(matches!(tape.activation(x, Activation::Rbf, Some(sigma)), Err(Error::Shape(_))));
}

#[test]
fn batchnorm_batch_mode_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[4, 3, 5, 5], &mut rng));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _, _) = tape.batchnorm_batch(x, g, b, 1e-5).unwrap();
    let (m, v) = tape.reduce_stats(y, &[0, 2, 3]).unwrap();
    for (mi, vi) in tape.value(m).data().iter().zip(tape.value(v).data()) {
        assert!(mi.abs() < 1e-12);
        assert!((vi - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_affine_on_normalized_input() {
    // Two values +-1 per channel: mean 0, variance 1 already.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 1.0]).unwrap());
    let g = tape.constant(Tensor::from_vec(vec![2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0]));
    let (y, _, _) = tape.batchnorm_batch(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0]);
}

#[test]
fn batchnorm_running_mode_constant_input_gives_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 4.2));
    let g = tape.constant(Tensor::from_vec(vec![1.7]));
    let b = tape.constant(Tensor::from_vec(vec![-0.3]));
    let y = tape.batchnorm_fixed(x, g, b, &[4.2], &[0.0], 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v + 0.3).abs() < 1e-12));
}

#[test]
fn reduce_stats_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let (m, v) = tape.reduce_stats(x, &[0]).unwrap();
    assert!((tape.value(m).item().unwrap() - 2.0).abs() < 1e-15);
    assert!((tape.value(v).item().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).data().iter().all(|d| (d - 1.0 / 3.0).abs() < 1e-15));

    let c = tape.constant(Tensor::full(&[2, 3], 5.0));
    let (_, vc) = tape.reduce_stats(c, &[0, 1]).unwrap();
    assert_eq!(tape.value(vc).item().unwrap(), 0.0);
    assert!(tape.reduce_stats(c, &[]).is_err());
    let empty = tape.constant(Tensor::zeros(&[0, 3]));
    assert!(tape.reduce_stats(empty, &[0]).is_err());
}

#[test]
fn backward_of_weighted_sum_is_input() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
    let x = tape.constant(Tensor::from_vec(vec![3.0, 4.0, -5.0]));
    let unused = tape.param(Tensor::from_vec(vec![9.0, 9.0]));
    let p = tape.mul(w, x).unwrap();
    let root = tape.sum(p);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.wrt(w).data(), &[3.0, 4.0, -5.0]);
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    assert!(g.get(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(w), Err(Error::Shape(_))));
}

#[test]
fn non_finite_forward_is_an_error_state() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0]));
    let l = tape.ln(x);
    let s = tape.sum(l);
    assert!(tape.ensure_finite().is_err());
    assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
}

fn assert_gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>) {
    let report = check_gradients(inputs, 1e-5, 1e-4, f).unwrap();
    assert!(report.passes(0.95, 1e-6), "{report:?}");
}

#[test]
fn gradcheck_closed_form_kl_composite() {
    // KL(N(mu_s, s_s) || N(mu_t, s_t)) with (mu_t, var_t) = reduce_stats(f(phi)).
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let phi = random_tensor(&[6], &mut rng);
    let samples = random_tensor(&[6], &mut rng);
    assert_gradcheck(&[phi], |tape, v| {
        let x = tape.constant(samples.clone());
        let t = tape.mul(v[0], x)?;
        let t = tape.exp(t);
        let (mu, var) = tape.reduce_stats(t, &[0])?;
        let sd = tape.sqrt(var);
        let sd = tape.clamp_min(sd, 1e-4);
        let (mu_s, sd_s) = (0.3, 0.8);
        let ln_sd = tape.ln(sd);
        let a = tape.add_scalar(ln_sd, -f64::ln(sd_s));
        let d = tape.add_scalar(mu, -mu_s);
        let d2 = tape.square(d);
        let num = tape.add_scalar(d2, sd_s * sd_s);
        let sd2 = tape.square(sd);
        let den = tape.scale(sd2, 2.0);
        let q = tape.div(num, den)?;
        let k = tape.add(a, q)?;
        let k = tape.add_scalar(k, -0.5);
        Ok(tape.sum(k))
    });
}

#[test]
fn gradcheck_conv_bn_rbf_pool_upsample_concat_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[2, 2, 4, 4], &mut rng);
    let w1 = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b1 = random_tensor(&[3], &mut rng);
    let sig = Tensor::from_vec(vec![0.9, 1.3, -1.1]);
    let gam = random_tensor(&[3], &mut rng);
    let bet = random_tensor(&[3], &mut rng);
    let w2 = random_tensor(&[2, 6, 1, 1], &mut rng);
    let b2 = random_tensor(&[2], &mut rng);
    let target = random_tensor(&[2, 2, 4, 4], &mut rng);
    assert_gradcheck(&[x, w1, b1, sig, gam, bet, w2, b2], |tape, v| {
        let c = tape.conv2d(v[0], v[1], v[2])?;
        let a = tape.activation(c, Activation::Rbf, Some(v[3]))?;
        let (n, _, _) = tape.batchnorm_batch(a, v[4], v[5], 1e-5)?;
        let p = tape.max_pool2(n)?;
        let u = tape.upsample2(p)?;
        let r = tape.relu(n);
        let cat = tape.concat_channels(u, r)?;
        let o = tape.conv2d(cat, v[6], v[7])?;
        let s = tape.softmax_channels(o)?;
        let t = tape.constant(target.clone());
        let m = tape.mul(s, t)?;
        Ok(tape.sum(m))
    });
}

#[test]
fn gradcheck_fixed_batchnorm_broadcast_reduce_gather_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[2, 3, 2, 3], &mut rng);
    let gam = random_tensor(&[3], &mut rng);
    let bet = random_tensor(&[3], &mut rng);
    let basis = random_tensor(&[4, 2], &mut rng);
    assert_gradcheck(&[x, gam, bet, basis], |tape, v| {
        let y = tape.batchnorm_fixed(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        let (m, var) = tape.reduce_stats(y, &[0, 2, 3])?;
        let centered = tape.sub(y, m)?;
        let spread = tape.mul(y, var)?;
        let scaled = tape.add(centered, spread)?;
        let idx: Vec<usize> = (0..36).map(|i| (i * 5) % 36).collect();
        let g = tape.gather(scaled, idx, &[9, 4])?;
        let p = tape.matmul(g, v[3])?;
        let sq = tape.square(p);
        let neg = tape.neg(sq);
        let e = tape.exp(neg);
        let r = tape.reduce_mean(e, &[0])?;
        let rs = tape.reshape(r, &[2])?;
        Ok(tape.sum(rs))
    });
}

#[test]
fn gradcheck_kde_sums() {
    let samples = Tensor::from_vec(vec![-0.4, 0.1, 0.35, 0.9]);
    let grid: Vec<f64> = (0..40).map(|i| -2.0 + 0.1 * i as f64).collect();
    let weights: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
    assert_gradcheck(&[samples], |tape, v| {
        let s = tape.kde_sums(v[0], grid.clone(), 8.0)?;
        let w = tape.constant(Tensor::from_vec(weights.clone()));
        let ws = tape.mul(s, w)?;
        Ok(tape.sum(ws))
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[2, 2, 6, 6], &mut rng));
        let w = tape.param(random_tensor(&[4, 2, 3, 3], &mut rng));
        let b = tape.param(random_tensor(&[4], &mut rng));
        let c = tape.conv2d(x, w, b).unwrap();
        let s = tape.softmax_channels(c).unwrap();
        tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
