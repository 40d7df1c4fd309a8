// SPDX-License-Identifier: MIT OR Apache-2.0

use olakit::container::Container;
use olakit::linalg::{matmul, resize_bilinear, row_stats, Matrix};
use olakit::ola::{ola_orders, reconstruct_rollout, rollout, LayerAttention, Order};
use olakit::preprocess::{augment, make_stack, mask_outliers, row_normalize, AugmentConfig, PreprocessConfig};
use olakit::probe::{score_predictions, Arc, LabelSet, Prediction, Targets, Task};
use olakit::similarity::retrieve;
use olakit::ssim::{ssim, SsimConfig};
use olakit::trace::{read_trace, validate_trace, write_trace, AttentionTrace};
use olakit::OlaMap;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(0.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn stochastic(l: usize, causal: bool) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(0.01f64..1.0, l * l).prop_map(move |v| {
        let mut m = Matrix::from_vec(l, l, v).unwrap();
        if causal {
            m.mask_upper();
        }
        for r in 0..l {
            let s: f64 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        m
    })
}

fn layers() -> impl Strategy<Value = LayerAttention<f64>> {
    (1usize..=6, 2usize..=8, any::<bool>()).prop_flat_map(|(n, l, causal)| {
        prop::collection::vec(stochastic(l, causal), n)
            .prop_map(move |ms| LayerAttention::new(ms, causal).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-12);
    }

    #[test]
    fn row_stats_match_two_pass(m in matrix(4, 7)) {
        for (r, s) in row_stats(&m).into_iter().enumerate() {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assert!((s.mean - mean).abs() < 1e-12);
            prop_assert!((s.std - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_stays_within_input_range(m in matrix(5, 9), rows in 2usize..60, cols in 2usize..60) {
        let out = resize_bilinear(&m, rows, cols);
        prop_assert_eq!(out.shape(), (rows, cols));
        prop_assert!(out.min_value() >= m.min_value() - 1e-12);
        prop_assert!(out.max_value() <= m.max_value() + 1e-12);
        prop_assert!((out[(0, 0)] - m[(0, 0)]).abs() < 1e-12);
        prop_assert!((out[(rows - 1, cols - 1)] - m[(4, 8)]).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in matrix(9, 9), b in matrix(9, 9)) {
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
    }

    #[test]
    fn decomposition_reconstructs_rollout(layers in layers()) {
        let n = layers.num_layers();
        let orders = ola_orders(&layers, n).unwrap();
        let rebuilt = reconstruct_rollout(&orders, n).unwrap();
        let target = rollout(&layers);
        let err = rebuilt.sub(&target).unwrap().frobenius_norm() / target.frobenius_norm();
        prop_assert!(err < 1e-10);
    }

    #[test]
    fn order_maps_are_stochastic_and_respect_causality(layers in layers()) {
        let n = layers.num_layers();
        for m in ola_orders(&layers, n).unwrap() {
            for s in m.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
            prop_assert!(m.min_value() >= 0.0);
            if layers.causal {
                prop_assert!(m.is_lower_triangular());
            }
        }
    }

    #[test]
    fn single_layer_first_order_is_the_layer(m in stochastic(5, false)) {
        let layers = LayerAttention::new(vec![m.clone()], false).unwrap();
        let first = &ola_orders(&layers, 1).unwrap()[1];
        prop_assert!(first.max_abs_diff(&m).unwrap() == 0.0);
    }

    #[test]
    fn stack_entries_stay_in_unit_interval(m in stochastic(8, false), size in 2usize..30, causal in any::<bool>()) {
        let map = OlaMap { order: Order::Level(1), matrix: m, model_id: "m".into(), text_id: "t".into() };
        let stack = make_stack(&[map], &PreprocessConfig { target_size: size, causal, ..Default::default() }).unwrap();
        prop_assert!(stack.channels[0].min_value() >= 0.0);
        prop_assert!(stack.channels[0].max_value() <= 1.0);
    }

    #[test]
    fn same_size_stack_rows_sum_to_one(m in stochastic(8, false)) {
        let map = OlaMap { order: Order::Level(1), matrix: m, model_id: "m".into(), text_id: "t".into() };
        let stack = make_stack(&[map], &PreprocessConfig { target_size: 8, ..Default::default() }).unwrap();
        for s in stack.channels[0].row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_then_normalize_is_idempotent_on_near_uniform_maps(m in prop::collection::vec(0.9f64..1.1, 36)) {
        let m = Matrix::from_vec(6, 6, m).unwrap();
        let once = row_normalize(&mask_outliers(&m, 3.0));
        let twice = row_normalize(&mask_outliers(&once, 3.0));
        prop_assert!(once.max_abs_diff(&twice).unwrap() < 1e-15);
    }

    #[test]
    fn zero_noise_augmentation_keeps_unit_interval(m in stochastic(6, false), seed in any::<u64>(), p in 0.0f64..=1.0) {
        let map = OlaMap { order: Order::Level(1), matrix: m, model_id: "m".into(), text_id: "t".into() };
        let stack = make_stack(&[map], &PreprocessConfig { target_size: 10, ..Default::default() }).unwrap();
        let cfg = AugmentConfig { gaussian_sigma: 0.0, highlight_probability: p, seed, ..Default::default() };
        let out = augment(&stack, &cfg).unwrap();
        prop_assert!(out.channels[0].min_value() >= 0.0 && out.channels[0].max_value() <= 1.0);
    }

    #[test]
    fn augment_is_deterministic_and_keeps_causality(m in stochastic(8, true), seed in any::<u64>()) {
        let map = OlaMap { order: Order::Level(1), matrix: m, model_id: "m".into(), text_id: "t".into() };
        let pre = PreprocessConfig { target_size: 12, causal: true, ..Default::default() };
        let stack = make_stack(&[map], &pre).unwrap();
        let cfg = AugmentConfig { seed, ..Default::default() };
        let a = augment(&stack, &cfg).unwrap();
        let b = augment(&stack, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.channels[0].is_lower_triangular());
        prop_assert!(a.channels[0].min_value() >= 0.0);
    }

    #[test]
    fn hits_are_monotone_in_k(maps in prop::collection::vec(matrix(8, 8), 3..8)) {
        let stacks: Vec<olakit::OlaStack> = maps
            .into_iter()
            .enumerate()
            .map(|(i, m)| olakit::OlaStack {
                channels: vec![m],
                channel_orders: vec![Order::Level(1)],
                model_id: "m".into(),
                text_id: format!("t{i}"),
                causal: false,
                source_len: 8,
            })
            .collect();
        let mut queries = stacks.clone();
        queries.reverse();
        let report = retrieve(&queries, &stacks, &[1, 2, 3, 100]).unwrap();
        let h: Vec<f64> = [1, 2, 3, 100].iter().map(|&k| report.hits(k).unwrap()).collect();
        prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(h[3], 1.0);
        prop_assert_eq!(report.hits(1).unwrap(), 1.0);
    }

    #[test]
    fn las_never_exceeds_uas(heads in prop::collection::vec((0usize..5, 0usize..3, 0usize..5, 0usize..3), 1..5)) {
        let candidates: Vec<usize> = (0..5).collect();
        let gold: Vec<Arc> = heads.iter().enumerate()
            .map(|(d, &(h, l, _, _))| Arc { dependent: d, head: h, label: l }).collect();
        let pred: Vec<Arc> = heads.iter().enumerate()
            .map(|(d, &(_, _, h, l))| Arc { dependent: d, head: h, label: l }).collect();
        let targets = Targets::Arcs { arcs: gold, candidates };
        let labels = LabelSet::from_names(["a", "b", "c"]);
        let m = score_predictions(Task::Dp, &labels, [(&targets, &Prediction::Arcs(pred))]).unwrap();
        prop_assert!(m.las.unwrap() <= m.uas.unwrap());
    }

    #[test]
    fn trace_round_trips_bit_exactly(l in 2usize..6, n in 1usize..3, h in 1usize..3, causal in any::<bool>(), seed in any::<u64>()) {
        let cfg = olakit::synth::SynthConfig {
            num_layers: n, num_heads: h, min_len: l, max_len: l, causal, ..Default::default()
        };
        let trace = olakit::synth::synth_trace(&cfg, seed, "model", "text", olakit::synth::Coupling::Shared, None).unwrap();
        let mut bytes = Vec::new();
        write_trace(&trace, &mut bytes).unwrap();
        let back: AttentionTrace = read_trace(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert!(validate_trace(&back).is_valid());
        let mut again = Vec::new();
        write_trace(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn container_header_escaping_round_trips(key in "[a-z_.]{1,8}", value in "\\PC{0,20}") {
        let mut c = Container::new();
        c.set(&key, &value);
        c.add_section("blob", vec![1, 2, 3]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.get(&key), Some(value.as_str()));
        prop_assert_eq!(back.section("blob"), Some(&[1u8, 2, 3][..]));
    }
}
