mod common;

use common::*;
use flsim_core::model::Arch;
use flsim_core::nn::*;
use flsim_core::Tensor;
use proptest::prelude::*;

fn conv_ref(x: &[f64], c: usize, h: usize, w: usize, spec: &Conv2dSpec, wt: &[f64], b: &[f64]) -> (Vec<f64>, usize, usize) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let p = spec.padding;
    let oh = (h + p.top + p.bottom - kh) / sh + 1;
    let ow = (w + p.left + p.right - kw) / sw + 1;
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for i in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let iy = (y * sh + u) as isize - p.top as isize;
                            let ix = (xx * sw + v) as isize - p.left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((o * c + i) * kh + u) * kw + v] * x[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Straight-line re-implementation of the stack for one sample.
fn reference_logits(specs: &[LayerSpec], params: &[Tensor<f64>], sample: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [mut c, mut h, mut w] = dims;
    let mut x = sample.to_vec();
    let mut k = 0;
    for spec in specs {
        match spec {
            LayerSpec::FrameDiff => {
                let plane = h * w;
                x = (0..(c - 1) * plane).map(|i| x[i + plane] - x[i]).collect();
                c -= 1;
            }
            LayerSpec::Conv2d(cs) => {
                let (out, oh, ow) = conv_ref(&x, c, h, w, cs, params[k].data(), params[k + 1].data());
                x = out;
                c = cs.out_channels;
                h = oh;
                w = ow;
                k += 2;
            }
            LayerSpec::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Flatten => {}
            LayerSpec::Dense { in_features, out_features } => {
                let (wt, b) = (params[k].data(), params[k + 1].data());
                x = (0..*out_features)
                    .map(|o| b[o] + (0..*in_features).map(|i| wt[o * in_features + i] * x[i]).sum::<f64>())
                    .collect();
                k += 2;
            }
        }
    }
    x
}

#[test]
fn frame_diff_matches_double_loop() {
    let x: Tensor<f64> = random_tensor(&[3, 5, 4, 6], 11, -1.0, 1.0);
    let d = frame_diff(&x).unwrap();
    assert_eq!(d.dims(), &[3, 4, 4, 6]);
    for n in 0..3 {
        for t in 0..4 {
            for p in 0..24 {
                let at = |f: usize| x.data()[(n * 5 + f) * 24 + p];
                assert_eq!(d.data()[(n * 4 + t) * 24 + p], at(t + 1) - at(t));
            }
        }
    }
}

#[test]
fn zero_weights_give_zero_logits() {
    let specs = Arch::Mini.layers();
    let params: Vec<Tensor<f64>> = param_dims(&specs).iter().map(|d| Tensor::zeros(d).unwrap()).collect();
    let (logits, _) = forward(&specs, &params, &random_batch(4, [16, 8, 8], 2)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mini_forward_matches_reference() {
    let specs = Arch::Mini.layers();
    let mut params: Vec<Tensor<f64>> = init_params(&specs, 5);
    jitter_biases(&mut params, 6);
    let batch = random_batch(3, [16, 8, 8], 7);
    let (logits, _) = forward(&specs, &params, &batch).unwrap();
    let per = 16 * 8 * 8;
    for n in 0..3 {
        let want = reference_logits(&specs, &params, &batch.inputs.data()[n * per..(n + 1) * per], [16, 8, 8]);
        for j in 0..2 {
            let got = logits.data()[n * 2 + j];
            assert!((got - want[j]).abs() <= 1e-12 * want[j].abs().max(1.0), "{got} vs {}", want[j]);
        }
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits: Tensor<f64> = random_tensor(&[64, 2], 3, -20.0, 20.0);
    let labels: Vec<usize> = (0..64).map(|i| (i * 7 + 3) % 2).collect();
    let mut want = 0.0;
    for (row, &l) in logits.data().chunks(2).zip(&labels) {
        let m = row[0].max(row[1]);
        let lse = m + (-(row[0] - row[1]).abs()).exp().ln_1p();
        want += lse - row[l];
    }
    want /= 64.0;
    let got = loss_softmax_ce(&logits, &labels).unwrap();
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    assert!(got >= 0.0);
}

#[test]
fn zero_inputs_give_zero_weight_gradients() {
    let specs = Arch::Mini.layers();
    let params: Vec<Tensor<f64>> = init_params(&specs, 1);
    let batch = Batch::new(Tensor::zeros(&[4, 16, 8, 8]).unwrap(), vec![0, 1, 1, 0]).unwrap();
    let (_, grads) = loss_and_grad(&specs, &params, &batch, Objective::SoftmaxCrossEntropy).unwrap();
    for g in grads.iter().step_by(2) {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn duplicated_sample_keeps_gradient() {
    let specs = Arch::Mini.layers();
    let params: Vec<Tensor<f64>> = init_params(&specs, 2);
    let one = random_batch::<f64>(1, [16, 8, 8], 9);
    let mut doubled = one.inputs.data().to_vec();
    doubled.extend_from_slice(one.inputs.data());
    let two = Batch::new(Tensor::new(vec![2, 16, 8, 8], doubled).unwrap(), vec![0, 0]).unwrap();
    let (l1, g1) = loss_and_grad(&specs, &params, &one, Objective::SoftmaxCrossEntropy).unwrap();
    let (l2, g2) = loss_and_grad(&specs, &params, &two, Objective::SoftmaxCrossEntropy).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    assert!(max_rel_diff(&g1, &g2) < 1e-12);
}

#[test]
fn gradcheck_mini() {
    let specs = Arch::Mini.layers();
    let mut params: Vec<Tensor<f64>> = init_params(&specs, 1);
    jitter_biases(&mut params, 2);
    let ds = dataset::<f64>(1, 3, 3, [16, 8, 8], 4);
    let report = grad_check(&specs, &params, &ds.full_batch(), 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_diffgated53_away_from_kinks() {
    let specs = Arch::DiffGated53.layers();
    let mut params: Vec<Tensor<f64>> = init_params(&specs, 1);
    jitter_biases(&mut params, 2);
    let ds = dataset::<f64>(1, 2, 2, [16, 32, 32], 4);
    let report = grad_check(&specs, &params, &ds.full_batch(), 1e-5).unwrap();
    assert!(report.kinked < report.checked);
    assert!(report.max_rel_err_smooth < 1e-4, "{report:?}");
}

#[test]
fn kink_free_model_reports_no_kinks() {
    let specs = vec![LayerSpec::Flatten, LayerSpec::dense(6, 2)];
    let params: Vec<Tensor<f64>> = init_params(&specs, 3);
    let report = grad_check(&specs, &params, &random_batch(3, [3, 1, 2], 1), 1e-5).unwrap();
    assert_eq!(report.kinked, 0);
    assert_eq!(report.max_rel_err_smooth, report.max_rel_err);
}

#[test]
fn square_loss_dense_gradient_is_closed_form() {
    let specs = vec![LayerSpec::Flatten, LayerSpec::dense(6, 2)];
    let mut params: Vec<Tensor<f64>> = init_params(&specs, 3);
    jitter_biases(&mut params, 4);
    let batch = random_batch::<f64>(5, [3, 1, 2], 5);
    let target: Tensor<f64> = random_tensor(&[5, 2], 6, -1.0, 1.0);
    let objective = Objective::Squared(&target);

    let (w, b) = (params[0].data(), params[1].data());
    let x = batch.inputs.data();
    let mut gw = vec![0.0; 12];
    let mut gb = vec![0.0; 2];
    for n in 0..5 {
        for o in 0..2 {
            let y = b[o] + (0..6).map(|i| w[o * 6 + i] * x[n * 6 + i]).sum::<f64>();
            let r = (y - target.data()[n * 2 + o]) / 5.0;
            gb[o] += r;
            for i in 0..6 {
                gw[o * 6 + i] += r * x[n * 6 + i];
            }
        }
    }
    let (_, grads) = loss_and_grad(&specs, &params, &batch, objective).unwrap();
    let closed = vec![Tensor::new(vec![2, 6], gw).unwrap(), Tensor::new(vec![2], gb).unwrap()];
    assert!(max_rel_diff(&grads, &closed) < 1e-12);

    let report = grad_check_with(&specs, &params, &batch, 1e-5, objective).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn two_steps_equal_one_summed_step() {
    let specs = Arch::Mini.layers();
    let params: Vec<Tensor<f64>> = init_params(&specs, 8);
    let (_, g1) = loss_and_grad(&specs, &params, &random_batch(4, [16, 8, 8], 1), Objective::SoftmaxCrossEntropy).unwrap();
    let (_, g2) = loss_and_grad(&specs, &params, &random_batch(4, [16, 8, 8], 2), Objective::SoftmaxCrossEntropy).unwrap();
    let twice = sgd_step(&sgd_step(&params, &g1, 0.1).unwrap(), &g2, 0.1).unwrap();
    let summed: Vec<Tensor<f64>> = g1.iter().zip(&g2).map(|(a, b)| a.zip_map(b, |x, y| x + y).unwrap()).collect();
    let once = sgd_step(&params, &summed, 0.1).unwrap();
    for (a, b) in twice.iter().zip(&once) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-15);
    }
}

#[test]
fn lr_zero_leaves_params() {
    let specs = Arch::Mini.layers();
    let params: Vec<Tensor<f32>> = init_params(&specs, 8);
    let (_, g) = loss_and_grad(&specs, &params, &random_batch(4, [16, 8, 8], 1), Objective::SoftmaxCrossEntropy).unwrap();
    let out = sgd_step(&params, &g, 0.0).unwrap();
    assert!(out.iter().zip(&params).all(|(a, b)| a.bit_eq(b)));
}

fn extent(input: usize, pad: usize, k: usize, s: usize) -> Option<usize> {
    (input + pad >= k).then(|| (input + pad - k) / s + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_algebra(
        frames in 2usize..5, h in 1usize..9, w in 1usize..9,
        c1 in 1usize..4, k1 in 1usize..4, s1 in 1usize..3, p1 in 0usize..2,
        c2 in 1usize..4, k2 in 1usize..4, s2 in 1usize..3, p2 in 0usize..2,
        seed in 0u64..1000,
    ) {
        let dims = [frames, h, w];
        let ext = extent(h, 2 * p1, k1, s1).zip(extent(w, 2 * p1, k1, s1)).and_then(|(a, b)| {
            extent(a, 2 * p2, k2, s2).zip(extent(b, 2 * p2, k2, s2))
        });
        let flat = ext.map(|(a, b)| c2 * a * b).unwrap_or(1);
        let specs = vec![
            LayerSpec::FrameDiff,
            LayerSpec::conv(frames - 1, c1, k1, s1, p1),
            LayerSpec::Relu,
            LayerSpec::conv(c1, c2, k2, s2, p2),
            LayerSpec::Flatten,
            LayerSpec::dense(flat, 2),
        ];
        match ext {
            Some((oh, ow)) => {
                let shapes = infer_shapes(dims, &specs).unwrap();
                prop_assert_eq!(shapes[4], ActShape::Spatial { c: c2, h: oh, w: ow });
                let params: Vec<Tensor<f64>> = init_params(&specs, seed);
                let (logits, _) = forward(&specs, &params, &random_batch(2, dims, seed)).unwrap();
                prop_assert_eq!(logits.dims(), &[2, 2]);
            }
            None => prop_assert!(infer_shapes(dims, &specs).is_err()),
        }
    }

    #[test]
    fn frame_diff_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x: Tensor<f64> = random_tensor(&[2, 4, 3, 3], seed, -1.0, 1.0);
        let y: Tensor<f64> = random_tensor(&[2, 4, 3, 3], seed + 1, -1.0, 1.0);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = frame_diff(&mix).unwrap();
        let (dx, dy) = (frame_diff(&x).unwrap(), frame_diff(&y).unwrap());
        let rhs = dx.zip_map(&dy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-13);
    }

    #[test]
    fn batch_permutation_invariance(seed in 0u64..10_000, shift in 1usize..6) {
        let specs = Arch::Mini.layers();
        let params: Vec<Tensor<f64>> = init_params(&specs, seed);
        let batch = random_batch::<f64>(6, [16, 8, 8], seed);
        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let permuted = Batch::new(
            batch.inputs.gather_rows(&perm).unwrap(),
            perm.iter().map(|&i| batch.labels[i]).collect(),
        ).unwrap();
        let (l1, g1) = loss_and_grad(&specs, &params, &batch, Objective::SoftmaxCrossEntropy).unwrap();
        let (l2, g2) = loss_and_grad(&specs, &params, &permuted, Objective::SoftmaxCrossEntropy).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-13);
        prop_assert!(max_rel_diff(&g1, &g2) < 1e-9);
    }
}
