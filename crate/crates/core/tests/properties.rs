use attnwise::data::{encode_cifar10, encode_idx, make_batches, parse_cifar10, parse_idx, LabeledImageSet};
use attnwise::models::{count_params, Model, ModelSpec};
use attnwise::optim::{partition_params, Adam, OptimizerMode, ParamGroup};
use attnwise::{AttnHead, AttnWiseLayer, BatchNorm, Mode, NamedParam, ParamRole, SoftmaxAxis, Tensor};
use proptest::prelude::*;

/// `(n, c, h, w)` and matching values in `[-range, range]`.
fn tensor4(max_side: usize, range: f32) -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    sized_tensor4(1, max_side, range)
}

fn sized_tensor4(min_side: usize, max_side: usize, range: f32) -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    (1..3usize, 1..3usize, min_side..=max_side, min_side..=max_side).prop_flat_map(move |(n, c, h, w)| {
        let len = n * c * h * w;
        (Just(vec![n, c, h, w]), prop::collection::vec(-range..range, len))
    })
}

fn slice_sums(v: &[f32], h: usize, w: usize, axis: SoftmaxAxis) -> Vec<f32> {
    let mut sums = Vec::new();
    for plane in v.chunks(h * w) {
        match axis {
            SoftmaxAxis::Rows => sums.extend(plane.chunks(w).map(|r| r.iter().sum::<f32>())),
            SoftmaxAxis::Cols => sums.extend((0..w).map(|c| (0..h).map(|r| plane[r * w + c]).sum::<f32>())),
        }
    }
    sums
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one((shape, data) in tensor4(7, 20.0), rows in any::<bool>()) {
        let axis = if rows { SoftmaxAxis::Rows } else { SoftmaxAxis::Cols };
        let out = Tensor::new(&shape, data).unwrap().softmax_axis(axis).unwrap().to_vec();
        for s in slice_sums(&out, shape[2], shape[3], axis) {
            prop_assert!((s - 1.0).abs() <= 1e-5, "slice sum {s}");
        }
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_ignores_a_constant_shift((shape, data) in tensor4(6, 5.0), shift in -50.0f32..50.0) {
        let t = Tensor::new(&shape, data.clone()).unwrap();
        let shifted = Tensor::new(&shape, data.iter().map(|v| v + shift).collect()).unwrap();
        for axis in [SoftmaxAxis::Rows, SoftmaxAxis::Cols] {
            let a = t.softmax_axis(axis).unwrap().to_vec();
            let b = shifted.softmax_axis(axis).unwrap().to_vec();
            for (x, y) in a.iter().zip(&b) {
                // exact in real arithmetic; f32 rounding of the shifted input costs a few ulps of |shift|
                prop_assert!((x - y).abs() <= 1e-6 + 4.0 * f32::EPSILON * shift.abs() * x, "{x} vs {y}");
            }
        }
    }

    // a 1x1 plane gives both softmaxes the value 1 exactly
    #[test]
    fn relevance_is_open_unit_interval((shape, input) in sized_tensor4(2, 6, 1.0), seed in any::<u64>()) {
        let sample = [shape[1], shape[2], shape[3]];
        let mut head = AttnHead::<f32>::new(sample);
        let n: usize = sample.iter().product();
        let weights: Vec<f32> = (0..2 * n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f32 / 250.0) - 2.0).collect();
        *head.wx.data_mut() = weights[..n].to_vec();
        *head.wy.data_mut() = weights[n..].to_vec();
        let trace = head.forward_traced(&Tensor::new(&shape, input).unwrap(), Mode::Train).unwrap();
        prop_assert!(trace.relevance.to_vec().iter().all(|r| *r > 0.0 && *r < 1.0));
        prop_assert_eq!(trace.output.shape(), &shape[..]);
    }

    #[test]
    fn zero_weight_relevance_is_uniform((shape, input) in tensor4(7, 10.0)) {
        let mut head = AttnHead::<f32>::new([shape[1], shape[2], shape[3]]);
        let trace = head.forward_traced(&Tensor::new(&shape, input).unwrap(), Mode::Train).unwrap();
        let want = 1.0 / (shape[2] * shape[3]) as f32;
        prop_assert!(trace.relevance.to_vec().iter().all(|r| (r - want).abs() <= 1e-6));
    }

    #[test]
    fn zero_conv_skip_layer_is_identity_on_nonnegative_input((shape, input) in tensor4(6, 3.0), heads in 1..4usize) {
        let input: Vec<f32> = input.iter().map(|v| v.abs()).collect();
        let mut layer = AttnWiseLayer::<f32>::new([shape[1], shape[2], shape[3]], heads, false, true).unwrap();
        let out = layer.forward(&Tensor::new(&shape, input.clone()).unwrap(), Mode::Train).unwrap();
        prop_assert_eq!(out.to_vec(), input);
    }

    #[test]
    fn batchnorm_standardizes_each_channel((shape, data) in tensor4(5, 4.0)) {
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut bn = BatchNorm::<f32>::new(c, false);
        let out = bn.forward(&Tensor::new(&shape, data.clone()).unwrap(), Mode::Train).unwrap().to_vec();
        for ch in 0..c {
            let pick = |v: &[f32]| -> Vec<f64> {
                (0..n).flat_map(|b| v[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec()).map(f64::from).collect()
            };
            let (x, y) = (pick(&data), pick(&out));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let spread = x.iter().map(|v| (v - mean(&x)).powi(2)).sum::<f64>() / x.len() as f64;
            prop_assume!(spread > 1e-2);
            let m = mean(&y);
            let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64;
            prop_assert!(m.abs() <= 1e-5, "mean {m}");
            prop_assert!((var - 1.0).abs() <= 1e-3, "var {var}");
        }
    }

    #[test]
    fn log_probs_are_normalized(seed in any::<u64>(), layers in 1..3usize, heads in 1..3usize) {
        let spec = ModelSpec::attention([1, 4, 8], layers, heads, seed % 2 == 0);
        let mut model = Model::<f32>::build(&spec).unwrap();
        attnwise::optim::init_params(&mut model, &attnwise::optim::InitConfig { std: 0.5, dense_std: None, seed }).unwrap();
        let x: Vec<f32> = (0..3 * 32).map(|i| ((i as u64 * 7919 + seed) % 97) as f32 / 97.0).collect();
        let out = model.forward(&Tensor::new(&[3, 1, 4, 8], x).unwrap(), Mode::Train).unwrap().to_vec();
        for row in out.chunks(10) {
            let lse = row.iter().map(|v| f64::from(*v).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-5, "logsumexp {lse}");
        }
    }

    #[test]
    fn param_count_matches_analytic(layers in 1..4usize, heads in 1..5usize, post_norm in any::<bool>(), c in 1..4usize) {
        let spec = ModelSpec::attention([c, 8, 4], layers, heads, post_norm);
        let model = Model::<f32>::build(&spec).unwrap();
        prop_assert_eq!(count_params(&model.parameters()), spec.analytic_param_count());
        prop_assert_eq!(model.count_params().total, attnwise::attn_layer_param_count(c, 8, 4, heads, post_norm) * layers + c * 32 * 10 + 10);
    }

    #[test]
    fn batches_cover_every_index_once(n in 0..300usize, bs in 1..64usize, shuffle in any::<bool>(), seed in any::<u64>(), epoch in 1..20u64) {
        let batches = make_batches(n, bs, shuffle, seed, epoch).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        prop_assert!(batches.iter().all(|b| !b.indices.is_empty() && b.indices.len() <= bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn idx_round_trip(h in 1..6usize, w in 1..6usize, items in prop::collection::vec((any::<u8>(), 0..10u8), 1..8)) {
        let pixels: Vec<f32> = (0..items.len() * h * w).map(|i| items[i % items.len()].0.wrapping_add(i as u8) as f32 / 255.0).collect();
        let labels: Vec<u8> = items.iter().map(|i| i.1).collect();
        let set = LabeledImageSet::new([1, h, w], pixels, labels).unwrap();
        let (im, lb) = encode_idx(&set).unwrap();
        let back = parse_idx(&im, &lb).unwrap();
        prop_assert_eq!(encode_idx(&back).unwrap(), (im, lb));
        prop_assert_eq!(back, set);
    }

    #[test]
    fn cifar_round_trip(bytes in prop::collection::vec(any::<u8>(), 3072 * 2)) {
        let mut record = Vec::new();
        for (i, chunk) in bytes.chunks(3072).enumerate() {
            record.push(i as u8 * 3 % 10);
            record.extend_from_slice(chunk);
        }
        let set = parse_cifar10(&record).unwrap();
        prop_assert!(set.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(encode_cifar10(&set).unwrap(), record);
    }

    #[test]
    fn adam_ignores_registry_order(values in prop::collection::vec(-2.0f64..2.0, 6), coefs in prop::collection::vec(-3.0f64..3.0, 6), steps in 1..5usize) {
        let run = |reverse: bool| -> Vec<f64> {
            let a = Tensor::parameter(&[3], values[..3].to_vec()).unwrap();
            let b = Tensor::parameter(&[3], values[3..].to_vec()).unwrap();
            let ka = Tensor::new(&[3], coefs[..3].to_vec()).unwrap();
            let kb = Tensor::new(&[3], coefs[3..].to_vec()).unwrap();
            let mut params = vec![NamedParam::new("a", ParamRole::Weight, &a), NamedParam::new("b", ParamRole::AttentionWeight, &b)];
            if reverse {
                params.reverse();
            }
            let groups = vec![ParamGroup::new("all", params, 1e-2)];
            let mut adam = Adam::new();
            for _ in 0..steps {
                a.zero_grad();
                b.zero_grad();
                let loss = a.mul(&a).unwrap().mul(&ka).unwrap().sum().add(&b.mul(&kb).unwrap().sum()).unwrap();
                loss.backward().unwrap();
                adam.step(&groups).unwrap();
            }
            [a.to_vec(), b.to_vec()].concat()
        };
        prop_assert_eq!(run(false), run(true));
    }

    #[test]
    fn segregated_equals_single_with_shared_rates(values in prop::collection::vec(-2.0f64..2.0, 8)) {
        let run = |mode: OptimizerMode| -> Vec<f64> {
            let w = Tensor::parameter(&[4], values[..4].to_vec()).unwrap();
            let z = Tensor::parameter(&[4], values[4..].to_vec()).unwrap();
            let params = vec![NamedParam::new("w", ParamRole::AttentionWeight, &w), NamedParam::new("z", ParamRole::Bias, &z)];
            let groups = partition_params(params, mode);
            let mut adam = Adam::new();
            for _ in 0..3 {
                w.zero_grad();
                z.zero_grad();
                w.mul(&z).unwrap().sum().backward().unwrap();
                adam.step(&groups).unwrap();
            }
            [w.to_vec(), z.to_vec()].concat()
        };
        prop_assert_eq!(run(OptimizerMode::Single { lr: 0.05 }), run(OptimizerMode::Segregated { attn_lr: 0.05, lr: 0.05 }));
    }

    #[test]
    fn reused_tensor_accumulates(values in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let x = Tensor::parameter(&[values.len()], values.clone()).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let grad = x.grad_vec().unwrap();
        for (g, v) in grad.iter().zip(&values) {
            prop_assert!((g - 2.0 * v).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_gradients_are_a_fixed_point() {
    let p = Tensor::parameter(&[3], vec![0.5f32, -1.0, 2.0]).unwrap();
    let groups = vec![ParamGroup::new(
        "g",
        vec![NamedParam::new("p", ParamRole::Weight, &p)],
        1e-3,
    )];
    let mut adam = Adam::new();
    for _ in 0..10 {
        p.zero_grad();
        p.scale(0.0).sum().backward().unwrap();
        adam.step(&groups).unwrap();
    }
    assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
}
